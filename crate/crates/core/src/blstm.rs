//! Bidirectional layers built from paired LSTMs, output concatenation,
//! stacking with per-layer dimension compression, and inter-layer dropout.
//!
//! A bidirectional layer runs one LSTM left-to-right and a second one
//! right-to-left over the same inputs; the per-position output is the
//! concatenation `[h_fwd[t], h_bwd[t]]` of the two hidden states, aligned so
//! that `h_bwd[t]` is the backward LSTM's state after it has consumed
//! `xs[T-1..=t]`. Stacking compresses each `2d` output back to `d` with a
//! transformation matrix so inter-layer dimensions stay constant; the top
//! layer's `2d` output goes to the tagger uncompressed.

use crate::linalg::{matvec, matvec_t, Matrix, Rng, Vector};
use crate::lstm::{lstm_backward, lstm_forward, LstmGrads, LstmParams, LstmState, LstmTape};

/// Forward and backward LSTMs of one bidirectional layer. The two directions
/// always have identical shapes and never share storage.
#[derive(Clone, Debug, PartialEq)]
pub struct BlstmLayer {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BlstmLayer {
    pub fn zeros(input_dim: usize, hidden_dim: usize, use_peepholes: bool) -> Self {
        BlstmLayer {
            forward: LstmParams::zeros(input_dim, hidden_dim, use_peepholes),
            backward: LstmParams::zeros(input_dim, hidden_dim, use_peepholes),
        }
    }

    pub fn init(rng: &mut Rng, input_dim: usize, hidden_dim: usize, scale: f64, use_peepholes: bool) -> Self {
        BlstmLayer {
            forward: LstmParams::init(rng, input_dim, hidden_dim, scale, use_peepholes),
            backward: LstmParams::init(rng, input_dim, hidden_dim, scale, use_peepholes),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward.hidden_dim()
    }
}

/// Tapes from both directions of one bidirectional forward pass. The backward
/// direction's tape is recorded in its own (reversed) time order.
#[derive(Clone, Debug, PartialEq)]
pub struct BlstmTape {
    pub forward: LstmTape,
    pub backward: LstmTape,
}

/// Gradients for both directions of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BlstmLayerGrads {
    pub forward: LstmGrads,
    pub backward: LstmGrads,
}

impl BlstmLayerGrads {
    pub fn zeros(input_dim: usize, hidden_dim: usize, use_peepholes: bool) -> Self {
        BlstmLayerGrads {
            forward: LstmGrads::zeros(input_dim, hidden_dim, use_peepholes),
            backward: LstmGrads::zeros(input_dim, hidden_dim, use_peepholes),
        }
    }

    pub fn add_assign(&mut self, other: &BlstmLayerGrads) {
        self.forward.add_assign(&other.forward);
        self.backward.add_assign(&other.backward);
    }
}

/// One bidirectional pass: `output[t] = concat(h_fwd[t], h_bwd[t])`.
pub fn blstm_forward(layer: &BlstmLayer, xs: &[Vector]) -> (Vec<Vector>, BlstmTape) {
    let d_h = layer.hidden_dim();
    let init = LstmState::zeros(d_h);
    let (fwd_out, fwd_tape) = lstm_forward(&layer.forward, xs, &init);

    let reversed: Vec<Vector> = xs.iter().rev().cloned().collect();
    let (bwd_out_rev, bwd_tape) = lstm_forward(&layer.backward, &reversed, &init);

    let t_len = xs.len();
    let mut outputs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut data = Vec::with_capacity(2 * d_h);
        data.extend_from_slice(fwd_out[t].as_slice());
        data.extend_from_slice(bwd_out_rev[t_len - 1 - t].as_slice());
        outputs.push(Vector::from_vec(data));
    }
    (outputs, BlstmTape { forward: fwd_tape, backward: bwd_tape })
}

/// Backward through one bidirectional layer. `grad_out[t]` has length `2d`;
/// its halves route to the two directions and the input gradients sum.
pub fn blstm_backward(
    layer: &BlstmLayer,
    tape: &BlstmTape,
    grad_out: &[Vector],
) -> (BlstmLayerGrads, Vec<Vector>) {
    let d_h = layer.hidden_dim();
    let t_len = tape.forward.len();
    assert_eq!(
        grad_out.len(),
        t_len,
        "blstm_backward: {} upstream gradients for a tape of {} steps",
        grad_out.len(),
        t_len
    );

    let mut grad_fwd = Vec::with_capacity(t_len);
    let mut grad_bwd_rev = vec![Vector::zeros(d_h); t_len];
    for (t, g) in grad_out.iter().enumerate() {
        assert_eq!(
            g.len(),
            2 * d_h,
            "blstm_backward: upstream gradient length {} but expected {}",
            g.len(),
            2 * d_h
        );
        let mut first = Vector::zeros(d_h);
        let mut second = Vector::zeros(d_h);
        for k in 0..d_h {
            first[k] = g[k];
            second[k] = g[d_h + k];
        }
        grad_fwd.push(first);
        grad_bwd_rev[t_len - 1 - t] = second;
    }

    let (fwd_grads, fwd_gx) = lstm_backward(&layer.forward, &tape.forward, &grad_fwd);
    let (bwd_grads, bwd_gx_rev) = lstm_backward(&layer.backward, &tape.backward, &grad_bwd_rev);

    let mut grad_xs = fwd_gx;
    for t in 0..t_len {
        grad_xs[t].add_assign(&bwd_gx_rev[t_len - 1 - t]);
    }
    (BlstmLayerGrads { forward: fwd_grads, backward: bwd_grads }, grad_xs)
}

/// `v_tran = w × v_o`, the per-position dimension compression.
pub fn compress(w: &Matrix, v: &Vector) -> Vector {
    assert_eq!(
        w.cols(),
        v.len(),
        "compress shape mismatch: matrix {}x{} times vector of length {}",
        w.rows(),
        w.cols(),
        v.len()
    );
    matvec(w, v)
}

/// Inverted-dropout masks: entries are `0` or `1/keep_prob`, one vector per
/// inter-layer boundary and position. Masks are sampled fresh per training
/// step; inference uses no masks at all.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub keep_prob: f64,
    /// `scales[boundary][position]`, each of the inter-layer dimension.
    pub scales: Vec<Vec<Vector>>,
}

impl DropoutMask {
    /// Sample masks for `boundaries` inter-layer gaps over a sequence of
    /// `seq_len` positions with `dim` units each.
    pub fn sample(rng: &mut Rng, keep_prob: f64, boundaries: usize, seq_len: usize, dim: usize) -> Self {
        assert!(
            keep_prob > 0.0 && keep_prob <= 1.0,
            "dropout keep_prob must lie in (0, 1], got {}",
            keep_prob
        );
        let inv = 1.0 / keep_prob;
        let scales = (0..boundaries)
            .map(|_| {
                (0..seq_len)
                    .map(|_| {
                        let mut v = Vector::zeros(dim);
                        for s in v.as_mut_slice() {
                            *s = if rng.next_f64() < keep_prob { inv } else { 0.0 };
                        }
                        v
                    })
                    .collect()
            })
            .collect();
        DropoutMask { keep_prob, scales }
    }
}

/// A stack of bidirectional layers with one compression matrix per
/// inter-layer boundary. The top layer feeds the tagger at size `2d`, so the
/// stack holds `depth - 1` compression matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedBlstm {
    pub layers: Vec<BlstmLayer>,
    pub compressions: Vec<Matrix>,
}

impl StackedBlstm {
    pub fn zeros(dim: usize, depth: usize, use_peepholes: bool) -> Self {
        assert!(depth >= 1, "stack depth must be at least 1");
        StackedBlstm {
            layers: (0..depth).map(|_| BlstmLayer::zeros(dim, dim, use_peepholes)).collect(),
            compressions: (0..depth - 1).map(|_| Matrix::zeros(dim, 2 * dim)).collect(),
        }
    }

    /// Initialize layer by layer; each layer draws its two directions and
    /// then its outgoing compression matrix (none for the top layer).
    pub fn init(rng: &mut Rng, dim: usize, depth: usize, scale: f64, use_peepholes: bool) -> Self {
        assert!(depth >= 1, "stack depth must be at least 1");
        let mut layers = Vec::with_capacity(depth);
        let mut compressions = Vec::with_capacity(depth.saturating_sub(1));
        for l in 0..depth {
            layers.push(BlstmLayer::init(rng, dim, dim, scale, use_peepholes));
            if l + 1 < depth {
                compressions.push(crate::linalg::init_uniform(rng, dim, 2 * dim, scale));
            }
        }
        StackedBlstm { layers, compressions }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].input_dim()
    }
}

/// Tape for one stacked forward pass: per layer, the bidirectional tape, the
/// concatenated outputs, and the dropout mask actually applied (identity when
/// absent).
#[derive(Clone, Debug)]
pub struct StackTape {
    pub per_layer: Vec<LayerTape>,
}

#[derive(Clone, Debug)]
pub struct LayerTape {
    pub blstm: BlstmTape,
    /// Concatenated `2d` outputs of this layer.
    pub concat_out: Vec<Vector>,
    /// Mask applied to this layer's compressed output, if any. Only layers
    /// below the top have one.
    pub mask: Option<Vec<Vector>>,
}

/// Gradients for the whole stack.
#[derive(Clone, Debug)]
pub struct StackGrads {
    pub layers: Vec<BlstmLayerGrads>,
    pub compressions: Vec<Matrix>,
}

impl StackGrads {
    pub fn zeros(net: &StackedBlstm) -> Self {
        let peep = net.layers[0].forward.use_peepholes;
        StackGrads {
            layers: net
                .layers
                .iter()
                .map(|l| BlstmLayerGrads::zeros(l.input_dim(), l.hidden_dim(), peep))
                .collect(),
            compressions: net.compressions.iter().map(|c| Matrix::zeros(c.rows(), c.cols())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &StackGrads) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            a.add_assign(b);
        }
        for (a, b) in self.compressions.iter_mut().zip(other.compressions.iter()) {
            a.add_assign(b);
        }
    }
}

/// Run the full stack. Every layer below the top is compressed back to `d`
/// and masked (training only); the top layer's `2d` output is returned as-is.
pub fn stack_forward(net: &StackedBlstm, xs: &[Vector], masks: Option<&DropoutMask>) -> (Vec<Vector>, StackTape) {
    if let Some(m) = masks {
        assert!(
            m.keep_prob > 0.0 && m.keep_prob <= 1.0,
            "dropout keep_prob must lie in (0, 1], got {}",
            m.keep_prob
        );
        assert_eq!(
            m.scales.len(),
            net.depth() - 1,
            "dropout mask covers {} boundaries but the stack has {}",
            m.scales.len(),
            net.depth() - 1
        );
    }

    let depth = net.depth();
    let mut current: Vec<Vector> = xs.to_vec();
    let mut per_layer = Vec::with_capacity(depth);
    for (l, layer) in net.layers.iter().enumerate() {
        let (concat_out, blstm_tape) = blstm_forward(layer, &current);
        if l + 1 < depth {
            let w = &net.compressions[l];
            let mut compressed: Vec<Vector> = concat_out.iter().map(|v| compress(w, v)).collect();
            let applied_mask = masks.map(|m| {
                let layer_masks = &m.scales[l];
                assert_eq!(
                    layer_masks.len(),
                    compressed.len(),
                    "dropout mask has {} positions but the sequence has {}",
                    layer_masks.len(),
                    compressed.len()
                );
                for (v, s) in compressed.iter_mut().zip(layer_masks.iter()) {
                    *v = crate::linalg::hadamard(v, s);
                }
                layer_masks.clone()
            });
            per_layer.push(LayerTape { blstm: blstm_tape, concat_out, mask: applied_mask });
            current = compressed;
        } else {
            per_layer.push(LayerTape { blstm: blstm_tape, concat_out: concat_out.clone(), mask: None });
            current = concat_out;
        }
    }
    (current, StackTape { per_layer })
}

/// Backward through concatenation, compression, and dropout for every layer.
/// Returns parameter gradients and the gradient with respect to the stack's
/// input sequence (the embeddings path).
pub fn stack_backward(net: &StackedBlstm, tape: &StackTape, grad_out: &[Vector]) -> (StackGrads, Vec<Vector>) {
    assert_eq!(
        tape.per_layer.len(),
        net.depth(),
        "stack_backward: tape covers {} layers but the stack has {}",
        tape.per_layer.len(),
        net.depth()
    );
    let mut grads = StackGrads::zeros(net);
    let mut upstream: Vec<Vector> = grad_out.to_vec();

    for l in (0..net.depth()).rev() {
        let layer_tape = &tape.per_layer[l];
        if l + 1 < net.depth() {
            // upstream is d-dimensional here: route back through the mask,
            // then the compression, to this layer's 2d concat output.
            let w = &net.compressions[l];
            let mut d_concat = Vec::with_capacity(upstream.len());
            for (t, g) in upstream.iter().enumerate() {
                let masked = match &layer_tape.mask {
                    Some(m) => crate::linalg::hadamard(g, &m[t]),
                    None => g.clone(),
                };
                grads.compressions[l].add_outer(&masked, &layer_tape.concat_out[t]);
                d_concat.push(matvec_t(w, &masked));
            }
            let (layer_grads, gx) = blstm_backward(&net.layers[l], &layer_tape.blstm, &d_concat);
            grads.layers[l] = layer_grads;
            upstream = gx;
        } else {
            let (layer_grads, gx) = blstm_backward(&net.layers[l], &layer_tape.blstm, &upstream);
            grads.layers[l] = layer_grads;
            upstream = gx;
        }
    }
    (grads, upstream)
}
