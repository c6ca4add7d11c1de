//! Allocation-free forward inference for GRU stacks and MLPs.
//!
//! GRU gate equations (reset gate applied to the recurrent candidate term):
//!
//! ```text
//! r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//! z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//! h' = (1 - z) * n + z * h
//! ```

use thiserror::Error;

use crate::kernels::{self, affine, Backend, KernelError};
use crate::model_format::{GruLayer, Linear, ModelBundle, ModelKind, Network};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("model kind {actual:?} cannot be used here (expected {expected:?})")]
    WrongKind { expected: ModelKind, actual: ModelKind },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Scratch space for one GRU cell evaluation. After a step it holds the gate
/// activations of the last evaluated layer.
#[derive(Debug, Clone)]
pub struct GruScratch {
    hidden: usize,
    gi: Vec<f32>,
    gh: Vec<f32>,
}

impl GruScratch {
    pub fn new(hidden: usize) -> Self {
        Self {
            hidden,
            gi: vec![0.0; 3 * hidden],
            gh: vec![0.0; 3 * hidden],
        }
    }

    pub fn reset_gate(&self) -> &[f32] {
        &self.gi[..self.hidden]
    }

    pub fn update_gate(&self) -> &[f32] {
        &self.gi[self.hidden..2 * self.hidden]
    }

    pub fn candidate(&self) -> &[f32] {
        &self.gi[2 * self.hidden..]
    }
}

/// Advances one GRU cell in place: `h` holds `h_prev` on entry and `h'` on exit.
pub fn gru_cell_step_into(
    layer: &GruLayer,
    x: &[f32],
    h: &mut [f32],
    scratch: &mut GruScratch,
    backend: Backend,
) -> Result<(), RuntimeError> {
    let hid = layer.hidden();
    if h.len() != hid || scratch.hidden != hid {
        return Err(RuntimeError::Contract(format!(
            "hidden length {} / scratch {} does not match layer width {hid}",
            h.len(),
            scratch.hidden
        )));
    }
    affine(&layer.w_ih, &layer.b_ih, x, &mut scratch.gi, backend)?;
    affine(&layer.w_hh, &layer.b_hh, h, &mut scratch.gh, backend)?;

    let (rz_i, n_i) = scratch.gi.split_at_mut(2 * hid);
    let (rz_h, n_h) = scratch.gh.split_at(2 * hid);
    for (a, b) in rz_i.iter_mut().zip(rz_h) {
        *a += *b;
    }
    kernels::sigmoid_inplace(rz_i, backend);
    let (r, z) = rz_i.split_at(hid);
    for ((n, hn), ri) in n_i.iter_mut().zip(n_h).zip(r) {
        *n += ri * hn;
    }
    kernels::tanh_inplace(n_i, backend);
    for ((hj, zj), nj) in h.iter_mut().zip(z).zip(n_i.iter()) {
        *hj = (1.0 - zj) * nj + zj * *hj;
    }
    Ok(())
}

/// Allocating convenience wrapper around [`gru_cell_step_into`].
pub fn gru_cell_step(layer: &GruLayer, x: &[f32], h_prev: &[f32], backend: Backend) -> Result<Vec<f32>, RuntimeError> {
    let mut h = h_prev.to_vec();
    let mut scratch = GruScratch::new(layer.hidden());
    gru_cell_step_into(layer, x, &mut h, &mut scratch, backend)?;
    Ok(h)
}

/// Per-layer hidden vectors carried between control steps.
#[derive(Debug, Clone)]
pub struct ControllerState {
    hidden: Vec<Vec<f32>>,
    scratch: GruScratch,
}

impl ControllerState {
    pub fn hidden(&self) -> &[Vec<f32>] {
        &self.hidden
    }

    pub fn layers(&self) -> usize {
        self.hidden.len()
    }

    /// Euclidean norm over all hidden vectors.
    pub fn norm(&self) -> f32 {
        self.hidden.iter().flatten().map(|v| v * v).sum::<f32>().sqrt()
    }

    pub fn clear(&mut self) {
        self.hidden.iter_mut().for_each(|h| h.fill(0.0));
    }

    pub fn scratch(&self) -> &GruScratch {
        &self.scratch
    }
}

/// Zero hidden state matching the model's GRU stack.
pub fn reset_state(model: &ModelBundle) -> Result<ControllerState, RuntimeError> {
    match &model.network {
        Network::GruStack { layers, .. } => {
            let h = layers.first().map_or(0, GruLayer::hidden);
            Ok(ControllerState {
                hidden: layers.iter().map(|l| vec![0.0; l.hidden()]).collect(),
                scratch: GruScratch::new(h),
            })
        }
        Network::Mlp { .. } => Err(RuntimeError::WrongKind {
            expected: ModelKind::GruStack,
            actual: ModelKind::Mlp,
        }),
    }
}

/// One autoregressive controller step: GRU layers in sequence, then the
/// linear head. Writes the head output into `y`. Performs no allocation.
pub fn controller_step(
    model: &ModelBundle,
    x: &[f32],
    state: &mut ControllerState,
    y: &mut [f32],
    backend: Backend,
) -> Result<(), RuntimeError> {
    let Network::GruStack { layers, head } = &model.network else {
        return Err(RuntimeError::WrongKind {
            expected: ModelKind::GruStack,
            actual: model.kind(),
        });
    };
    if state.hidden.len() != layers.len() {
        return Err(RuntimeError::Contract(format!(
            "state has {} layers, model has {}",
            state.hidden.len(),
            layers.len()
        )));
    }
    if x.len() != model.input_dim() {
        return Err(KernelError::DimensionMismatch {
            op: "controller input",
            expected: model.input_dim(),
            actual: x.len(),
        }
        .into());
    }
    let ControllerState { hidden, scratch } = state;
    for (l, layer) in layers.iter().enumerate() {
        let (done, rest) = hidden.split_at_mut(l);
        let input: &[f32] = if l == 0 { x } else { &done[l - 1] };
        gru_cell_step_into(layer, input, &mut rest[0], scratch, backend)?;
    }
    let top = hidden.last().expect("validated non-empty stack");
    affine(&head.weight, &head.bias, top, y, backend)?;
    Ok(())
}

/// Reusable buffers for [`mlp_forward_into`].
#[derive(Debug, Clone)]
pub struct MlpScratch {
    a: Vec<f32>,
    b: Vec<f32>,
}

impl MlpScratch {
    pub fn for_model(model: &ModelBundle) -> Self {
        let w = model.layer_dims().into_iter().max().unwrap_or(0);
        Self {
            a: vec![0.0; w],
            b: vec![0.0; w],
        }
    }
}

/// Alternating affine and `fast_tanh` layers; the last layer is affine only.
pub fn mlp_forward_into(
    model: &ModelBundle,
    x: &[f32],
    y: &mut [f32],
    scratch: &mut MlpScratch,
    backend: Backend,
) -> Result<(), RuntimeError> {
    let Network::Mlp { layers } = &model.network else {
        return Err(RuntimeError::WrongKind {
            expected: ModelKind::Mlp,
            actual: model.kind(),
        });
    };
    let n = layers.len();
    let MlpScratch { a, b } = scratch;
    for (i, layer) in layers.iter().enumerate() {
        let input: &[f32] = if i == 0 { x } else { &a[..layer.inputs()] };
        if i + 1 == n {
            affine(&layer.weight, &layer.bias, input, y, backend)?;
        } else {
            let out = &mut b[..layer.outputs()];
            affine(&layer.weight, &layer.bias, input, out, backend)?;
            kernels::tanh_inplace(out, backend);
            std::mem::swap(a, b);
        }
    }
    Ok(())
}

pub fn mlp_forward(model: &ModelBundle, x: &[f32], backend: Backend) -> Result<Vec<f32>, RuntimeError> {
    let mut y = vec![0.0; model.output_dim()];
    let mut scratch = MlpScratch::for_model(model);
    mlp_forward_into(model, x, &mut y, &mut scratch, backend)?;
    Ok(y)
}

/// A GRU model bound to its recurrent state and backend.
#[derive(Debug, Clone)]
pub struct GruController<'m> {
    model: &'m ModelBundle,
    state: ControllerState,
    backend: Backend,
    output: Vec<f32>,
}

impl<'m> GruController<'m> {
    pub fn new(model: &'m ModelBundle, backend: Backend) -> Result<Self, RuntimeError> {
        Ok(Self {
            model,
            state: reset_state(model)?,
            backend,
            output: vec![0.0; model.output_dim()],
        })
    }

    pub fn step(&mut self, x: &[f32]) -> Result<&[f32], RuntimeError> {
        controller_step(self.model, x, &mut self.state, &mut self.output, self.backend)?;
        Ok(&self.output)
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn model(&self) -> &ModelBundle {
        self.model
    }
}

/// Affine layer output as an owned vector; used by tests and tools.
pub fn linear_forward(layer: &Linear, x: &[f32], backend: Backend) -> Result<Vec<f32>, RuntimeError> {
    let mut y = vec![0.0; layer.outputs()];
    affine(&layer.weight, &layer.bias, x, &mut y, backend)?;
    Ok(y)
}
