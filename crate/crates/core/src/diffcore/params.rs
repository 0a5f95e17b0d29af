use super::{DiffError, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Position of a single scalar parameter inside a set of networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamSlot {
    pub net: usize,
    pub layer: usize,
    pub kind: ParamKind,
    /// Row-major index inside the weight matrix, or bias index.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Block {
    net: usize,
    layer: usize,
    kind: ParamKind,
    offset: usize,
    len: usize,
}

/// Bijection between `(net, layer, weight|bias, index)` and positions in a
/// flat parameter vector.
///
/// Order: networks in the order given, then layers, then the weight matrix
/// (row-major) followed by the bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    blocks: Vec<Block>,
    /// `starts[net][layer]` is the offset of that layer's weight block.
    starts: Vec<Vec<usize>>,
    len: usize,
}

impl ParamLayout {
    pub fn of(nets: &[&Network]) -> Self {
        let mut blocks = Vec::new();
        let mut starts = Vec::with_capacity(nets.len());
        let mut offset = 0;
        for (n, net) in nets.iter().enumerate() {
            let mut layer_starts = Vec::with_capacity(net.layers().len());
            for (l, layer) in net.layers().iter().enumerate() {
                layer_starts.push(offset);
                for (kind, len) in [(ParamKind::Weight, layer.weights.len()), (ParamKind::Bias, layer.bias.len())] {
                    blocks.push(Block { net: n, layer: l, kind, offset, len });
                    offset += len;
                }
            }
            starts.push(layer_starts);
        }
        ParamLayout { blocks, starts, len: offset }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Offset of the weight block of `(net, layer)`; the bias block follows it.
    pub fn layer_offset(&self, net: usize, layer: usize) -> usize {
        self.starts[net][layer]
    }

    pub fn index_of(&self, slot: ParamSlot) -> Option<usize> {
        let start = *self.starts.get(slot.net)?.get(slot.layer)?;
        let pos = self.blocks.partition_point(|b| b.offset < start);
        let w = &self.blocks[pos];
        let block = if slot.kind == ParamKind::Weight { w } else { &self.blocks[pos + 1] };
        (slot.index < block.len).then_some(block.offset + slot.index)
    }

    pub fn slot_of(&self, flat: usize) -> Option<ParamSlot> {
        if flat >= self.len {
            return None;
        }
        let pos = self.blocks.partition_point(|b| b.offset + b.len <= flat);
        let b = &self.blocks[pos];
        Some(ParamSlot { net: b.net, layer: b.layer, kind: b.kind, index: flat - b.offset })
    }
}

/// Flat copy of every parameter of a set of networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn gather(nets: &[&Network]) -> Self {
        let layout = ParamLayout::of(nets);
        let mut values = Vec::with_capacity(layout.len());
        for net in nets {
            for layer in net.layers() {
                values.extend(layer.weights.iter());
                values.extend(layer.bias.iter());
            }
        }
        ParamVector { values, layout }
    }

    /// Writes the values back into networks of the same architecture.
    pub fn scatter(&self, nets: &mut [&mut Network]) -> Result<(), DiffError> {
        let shapes: Vec<&Network> = nets.iter().map(|n| &**n).collect();
        if ParamLayout::of(&shapes) != self.layout {
            return Err(DiffError::LayoutMismatch);
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFiniteValue { node: "parameter vector".into() });
        }
        let mut it = self.values.iter().copied();
        for net in nets.iter_mut() {
            for layer in net.layers_mut() {
                for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                    *w = it.next().expect("layout checked");
                }
            }
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Activation;
    use proptest::prelude::*;

    fn nets() -> (Network, Network) {
        let a = Network::init(&[3, 5, 2], Activation::Tanh, Activation::Identity, 1).unwrap();
        let b = Network::init(&[2, 4, 4, 1], Activation::Tanh, Activation::Tanh, 2).unwrap();
        (a, b)
    }

    #[test]
    fn length_is_total_param_count() {
        let (a, b) = nets();
        let layout = ParamLayout::of(&[&a, &b]);
        assert_eq!(layout.len(), a.param_count() + b.param_count());
        assert_eq!(layout.len(), (15 + 5 + 10 + 2) + (8 + 4 + 16 + 4 + 4 + 1));
    }

    #[test]
    fn gather_scatter_round_trip() {
        let (mut a, mut b) = nets();
        let mut p = ParamVector::gather(&[&a, &b]);
        for (i, v) in p.values.iter_mut().enumerate() {
            *v = i as f64;
        }
        p.scatter(&mut [&mut a, &mut b]).unwrap();
        let q = ParamVector::gather(&[&a, &b]);
        assert_eq!(p, q);
        let slot = ParamSlot { net: 1, layer: 1, kind: ParamKind::Weight, index: 5 };
        let flat = p.layout.index_of(slot).unwrap();
        assert_eq!(b.layers()[1].weights[[1, 1]], flat as f64);
    }

    #[test]
    fn scatter_rejects_other_architecture() {
        let (a, b) = nets();
        let p = ParamVector::gather(&[&a, &b]);
        let (mut a2, _) = nets();
        assert!(matches!(p.scatter(&mut [&mut a2]), Err(DiffError::LayoutMismatch)));
    }

    proptest! {
        #[test]
        fn layout_is_a_bijection(dims in proptest::collection::vec(1usize..6, 2..5), flat in 0usize..1000) {
            let net = Network::init(&dims, Activation::Tanh, Activation::Identity, 0).unwrap();
            let (other, _) = nets();
            let layout = ParamLayout::of(&[&other, &net]);
            let flat = flat % layout.len();
            let slot = layout.slot_of(flat).unwrap();
            prop_assert_eq!(layout.index_of(slot), Some(flat));
            prop_assert!(layout.slot_of(layout.len()).is_none());
        }
    }
}
