use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::models::{lerp_node, CoilsModel};
use crate::systems::System;
use crate::training::format_float;

/// Quantity sampled on a planar grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FieldKind {
    /// `f̂(x, u*(x))`.
    NominalClosedLoop,
    /// `f*(x, u*(x))`.
    ProjectedClosedLoop,
    /// `f(x, u*(x))` for a true plant.
    TrueClosedLoop { system: System },
    /// `V(x)`.
    Lyapunov,
    /// The bounded network output `v_cap · tanh(·)` before the shift and
    /// the quadratic floor.
    LyapunovNet,
}

impl FieldKind {
    pub fn file_stem(&self) -> &'static str {
        match self {
            FieldKind::NominalClosedLoop => "nominal",
            FieldKind::ProjectedClosedLoop => "projected",
            FieldKind::TrueClosedLoop { .. } => "true",
            FieldKind::Lyapunov => "V",
            FieldKind::LyapunovNet => "gV",
        }
    }
}

/// Values at the nodes of a regular grid over `[lb, ub]`. Node `(i, j)`
/// sits at `x1 = lerp(i)`, `x2 = lerp(j)` and is stored in row
/// `i · resolution + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrid {
    pub kind: FieldKind,
    pub lb: [f64; 2],
    pub ub: [f64; 2],
    pub resolution: usize,
    pub nodes: Array2<f64>,
    pub values: Array2<f64>,
}

impl FieldGrid {
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.resolution + j
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SimError> {
        self.write_csv_to(super::create(path)?)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec!["x1".to_string(), "x2".to_string()];
        if self.values.ncols() == 1 {
            head.push("value".into());
        } else {
            head.extend((1..=self.values.ncols()).map(|k| format!("value{k}")));
        }
        w.write_record(&head)?;
        for (x, v) in self.nodes.rows().into_iter().zip(self.values.rows()) {
            let row: Vec<String> = x.iter().chain(v.iter()).map(|t| format_float(*t)).collect();
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Samples `kind` on a `resolution × resolution` grid over the model's state box.
pub fn export_field(model: &CoilsModel, kind: FieldKind, resolution: usize) -> Result<FieldGrid, SimError> {
    let n = model.state_dim();
    if n != 2 {
        return Err(SimError::UnsupportedDimension(n));
    }
    if resolution < 2 {
        return Err(SimError::Resolution(resolution));
    }
    let h = &model.hyper;
    let (lb, ub) = ([h.x_lb[0], h.x_lb[1]], [h.x_ub[0], h.x_ub[1]]);
    let nodes = Array2::from_shape_fn((resolution * resolution, 2), |(r, c)| {
        let k = if c == 0 { r / resolution } else { r % resolution };
        lerp_node(lb[c], ub[c], k, resolution)
    });
    let values = match kind {
        FieldKind::NominalClosedLoop => model.evaluate_batch(nodes.view())?.fhat,
        FieldKind::ProjectedClosedLoop => model.closed_loop_batch(nodes.view())?,
        FieldKind::TrueClosedLoop { system } => {
            let u = model.controller_batch(nodes.view())?;
            system.dynamics_batch(nodes.view(), u.view())?
        }
        FieldKind::Lyapunov => model.lyapunov_batch(nodes.view())?.0.insert_axis(Axis(1)),
        FieldKind::LyapunovNet => model.lyapunov_net_batch(nodes.view())?.insert_axis(Axis(1)),
    };
    Ok(FieldGrid { kind, lb, ub, resolution, nodes, values })
}
