//! The ST-DAGCN network: three spatial-temporal DAG-convolution layers,
//! global average pooling, and a sigmoid-activated scalar head.
//!
//! Layer equation, per time slice t:
//!   spatial:  H_s[:,t,:] = relu(BatchNorm(A^T (H[:,t,:] W_s + Bias)))
//! then per node n:
//!   temporal: H_t[n,:,:] = relu(BatchNorm(Conv1D(H_s[n,:,:], W_t)))
//! Dropout follows each full layer during training. Batched tensors are laid
//! out [B, T, N, F].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mode, Tape, Tensor};
use crate::util::sigmoid;

pub const FEATURE_DIM: usize = 64;
pub const NUM_LAYERS: usize = 3;

/// The learnable weighted adjacency over N nodes. Entry `a[j*n + i]` is the
/// strength of the directed edge node_j -> node_i. The diagonal is held at
/// exactly zero (self-loops are cycles) and alpha is exactly 1/N.
pub struct BrainGraph {
    pub a: Tensor,
    pub n: usize,
    pub alpha: f64,
}

impl BrainGraph {
    /// Uniform(-0.1, 0.1) off-diagonal initialization. A zero start would
    /// make every spatial output zero and degenerate the batch statistics.
    pub fn init_uniform(n: usize, rng: &mut ChaCha8Rng) -> BrainGraph {
        let mut data = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                if i != j {
                    data[j * n + i] = rng.gen_range(-0.1..0.1);
                }
            }
        }
        let a = Tensor::new(vec![n, n], data)
            .expect("square adjacency")
            .requires_grad();
        BrainGraph { a, n, alpha: 1.0 / n as f64 }
    }

    /// Wraps a fixed matrix (e.g. a correlation graph); masks the diagonal.
    pub fn from_matrix(n: usize, matrix: &[f64], trainable: bool) -> Result<BrainGraph> {
        if matrix.len() != n * n {
            return Err(Error::Shape(format!(
                "adjacency has {} entries for {n} nodes",
                matrix.len()
            )));
        }
        let t = Tensor::new(vec![n, n], matrix.to_vec())?;
        let a = if trainable { t.requires_grad() } else { t };
        let graph = BrainGraph { a, n, alpha: 1.0 / n as f64 };
        graph.mask_diagonal();
        Ok(graph)
    }

    /// Forces the diagonal to exactly zero (data and any pending gradient).
    pub fn mask_diagonal(&self) {
        let n = self.n;
        let mut d = self.a.inner.borrow_mut();
        for i in 0..n {
            d.data[i * n + i] = 0.0;
            if let Some(g) = d.grad.as_mut() {
                g[i * n + i] = 0.0;
            }
        }
    }

    pub fn matrix(&self) -> Vec<f64> {
        self.a.to_vec()
    }

    pub fn l1_norm(&self) -> f64 {
        self.a.data().iter().map(|v| v.abs()).sum()
    }
}

/// Running batch-norm state with learnable affine. `bypass` is a test hook
/// that turns the normalization into the identity for hand-computable cases.
pub struct BnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub bypass: bool,
}

impl BnState {
    pub fn new(channels: usize) -> BnState {
        BnState {
            gamma: Tensor::new(vec![channels], vec![1.0; channels])
                .expect("bn gamma")
                .requires_grad(),
            beta: Tensor::zeros(vec![channels]).requires_grad(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            bypass: false,
        }
    }

    fn apply(&mut self, tape: &Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if self.bypass {
            return Ok(x.clone());
        }
        tape.batch_norm(
            x,
            &self.gamma,
            &self.beta,
            &mut self.running_mean,
            &mut self.running_var,
            mode,
        )
    }
}

/// One spatial-temporal DAG convolution layer.
pub struct StDagcLayer {
    pub w_s: Tensor,   // [f_in, f_s]
    pub bias: Tensor,  // [N, f_s]
    pub bn_s: BnState, // over f_s channels
    pub w_t: Tensor,   // [k, f_s, f_t]
    pub bn_t: BnState, // over f_t channels
}

impl StDagcLayer {
    /// Uniform(+-1/sqrt(fan_in)) weights, zero bias.
    pub fn new(
        n: usize,
        f_in: usize,
        f_s: usize,
        f_t: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> StDagcLayer {
        let mut uniform = |fan_in: usize, len: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let w_s = Tensor::new(vec![f_in, f_s], uniform(f_in, f_in * f_s))
            .expect("w_s")
            .requires_grad();
        let bias = Tensor::zeros(vec![n, f_s]).requires_grad();
        let w_t = Tensor::new(vec![kernel, f_s, f_t], uniform(kernel * f_s, kernel * f_s * f_t))
            .expect("w_t")
            .requires_grad();
        StDagcLayer {
            w_s,
            bias,
            bn_s: BnState::new(f_s),
            w_t,
            bn_t: BnState::new(f_t),
        }
    }
}

/// All trainable weights of the three-layer network plus the scalar head.
pub struct ModelParams {
    pub layers: Vec<StDagcLayer>,
    pub head_w: Tensor, // [FEATURE_DIM]
    pub head_b: Tensor, // [1]
    pub dropout: f64,
    pub temporal_kernel: usize,
    pub n: usize,
}

impl ModelParams {
    /// The published architecture: three layers, feature dimension 64
    /// throughout (input channel 1 in layer 1), single-logit head.
    pub fn new(n: usize, temporal_kernel: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
        if temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel {temporal_kernel} must be odd"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout rate {dropout} not in [0, 1)")));
        }
        let layers = (0..NUM_LAYERS)
            .map(|l| {
                let f_in = if l == 0 { 1 } else { FEATURE_DIM };
                StDagcLayer::new(n, f_in, FEATURE_DIM, FEATURE_DIM, temporal_kernel, rng)
            })
            .collect();
        let bound = 1.0 / (FEATURE_DIM as f64).sqrt();
        let head_w = Tensor::new(
            vec![FEATURE_DIM],
            (0..FEATURE_DIM).map(|_| rng.gen_range(-bound..bound)).collect(),
        )?
        .requires_grad();
        let head_b = Tensor::zeros(vec![1]).requires_grad();
        Ok(ModelParams {
            layers,
            head_w,
            head_b,
            dropout,
            temporal_kernel,
            n,
        })
    }

    /// Every trainable tensor paired with its weight-decay eligibility:
    /// weight matrices decay, biases and batch-norm affine do not.
    pub fn parameters(&self) -> Vec<(Tensor, bool)> {
        let mut ps = Vec::new();
        for layer in &self.layers {
            ps.push((layer.w_s.clone(), true));
            ps.push((layer.bias.clone(), false));
            ps.push((layer.bn_s.gamma.clone(), false));
            ps.push((layer.bn_s.beta.clone(), false));
            ps.push((layer.w_t.clone(), true));
            ps.push((layer.bn_t.gamma.clone(), false));
            ps.push((layer.bn_t.beta.clone(), false));
        }
        ps.push((self.head_w.clone(), true));
        ps.push((self.head_b.clone(), false));
        ps
    }
}

/// Spatial DAG convolution on a batched [B, T, N, f] tensor.
pub fn dag_conv_batch(
    tape: &Tape,
    h: &Tensor,
    graph: &BrainGraph,
    layer: &mut StDagcLayer,
    mode: Mode,
) -> Result<Tensor> {
    let sh = h.shape();
    let node_axis = match sh.len() {
        4 => sh[2],
        3 => sh[1],
        _ => 0,
    };
    if node_axis != graph.n {
        return Err(Error::Shape(format!(
            "dag_conv: input {sh:?} does not carry {} nodes",
            graph.n
        )));
    }
    let lin = tape.matmul(h, &layer.w_s)?;
    let biased = tape.add_bias(&lin, &layer.bias)?;
    let agg = tape.graph_aggregate(&graph.a, &biased)?;
    let normed = layer.bn_s.apply(tape, &agg, mode)?;
    Ok(tape.relu(&normed))
}

/// Temporal convolution on a batched [B, T, N, f_s] tensor; nodes never mix.
pub fn temporal_conv_batch(
    tape: &Tape,
    h: &Tensor,
    layer: &mut StDagcLayer,
    mode: Mode,
) -> Result<Tensor> {
    let conv = tape.conv1d(h, &layer.w_t)?;
    let normed = layer.bn_t.apply(tape, &conv, mode)?;
    Ok(tape.relu(&normed))
}

/// Spatial DAG convolution over a single subject's [N, T, f] features.
pub fn dag_conv(
    tape: &Tape,
    h: &Tensor,
    graph: &BrainGraph,
    layer: &mut StDagcLayer,
    mode: Mode,
) -> Result<Tensor> {
    let batched = to_batched(tape, h)?;
    let out = dag_conv_batch(tape, &batched, graph, layer, mode)?;
    from_batched(tape, &out)
}

/// Temporal convolution over a single subject's [N, T, f_s] features.
pub fn temporal_conv(
    tape: &Tape,
    h: &Tensor,
    layer: &mut StDagcLayer,
    mode: Mode,
) -> Result<Tensor> {
    let batched = to_batched(tape, h)?;
    let out = temporal_conv_batch(tape, &batched, layer, mode)?;
    from_batched(tape, &out)
}

/// [N, T, f] -> [T, N, f]; the batched ops read a 3-D tensor as unit batch.
fn to_batched(tape: &Tape, h: &Tensor) -> Result<Tensor> {
    tape.transpose01(h)
}

/// [T, N, f] -> [N, T, f].
fn from_batched(tape: &Tape, h: &Tensor) -> Result<Tensor> {
    tape.transpose01(h)
}

/// Full forward over a batch: [B, T', N, 1] -> logits [B].
pub fn forward_batch(
    tape: &Tape,
    x: &Tensor,
    graph: &BrainGraph,
    params: &mut ModelParams,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if !x.all_finite() {
        return Err(Error::Data("forward: non-finite value in input".into()));
    }
    let sx = x.shape();
    if sx.len() != 4 || sx[2] != params.n || sx[3] != 1 {
        return Err(Error::Shape(format!(
            "forward: input {sx:?}, expected [B, T', {}, 1]",
            params.n
        )));
    }
    if sx[1] < params.temporal_kernel {
        return Err(Error::Shape(format!(
            "forward: window length {} shorter than temporal kernel {}",
            sx[1], params.temporal_kernel
        )));
    }
    let mut h = x.clone();
    for layer in params.layers.iter_mut() {
        h = dag_conv_batch(tape, &h, graph, layer, mode)?;
        h = temporal_conv_batch(tape, &h, layer, mode)?;
        h = tape.dropout(&h, params.dropout, mode, rng)?;
    }
    let pooled = tape.global_mean_pool(&h)?;
    tape.head_affine(&pooled, &params.head_w, &params.head_b)
}

/// Single-subject forward: [N, T', 1] -> scalar logit.
pub fn forward(
    tape: &Tape,
    x: &Tensor,
    graph: &BrainGraph,
    params: &mut ModelParams,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let sx = x.shape();
    if sx.len() != 3 || sx[2] != 1 {
        return Err(Error::Shape(format!("forward: input {sx:?}, expected [N, T', 1]")));
    }
    // [N, T', 1] -> [1, T', N, 1] without touching the tape: the input is a
    // leaf, so a plain data transpose is enough.
    let (n, t) = (sx[0], sx[1]);
    let xd = x.data();
    let mut data = vec![0.0; n * t];
    for i in 0..n {
        for j in 0..t {
            data[j * n + i] = xd[i * t + j];
        }
    }
    drop(xd);
    let batched = Tensor::new(vec![1, t, n, 1], data)?;
    let logits = forward_batch(tape, &batched, graph, params, mode, rng)?;
    let logit = logits.data()[0];
    Ok(logit)
}

/// Classification probability from a logit.
pub fn predict_proba(logit: f64) -> f64 {
    sigmoid(logit)
}

// ---------------------------------------------------------------------------
// Plain-data snapshots (checkpoints)

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorSnapshot {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorSnapshot {
    fn of(t: &Tensor) -> TensorSnapshot {
        TensorSnapshot {
            shape: t.shape(),
            data: t.to_vec(),
        }
    }

    fn build(&self, trainable: bool) -> Result<Tensor> {
        let t = Tensor::new(self.shape.clone(), self.data.clone())?;
        Ok(if trainable { t.requires_grad() } else { t })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BnSnapshot {
    pub gamma: TensorSnapshot,
    pub beta: TensorSnapshot,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerSnapshot {
    pub w_s: TensorSnapshot,
    pub bias: TensorSnapshot,
    pub bn_s: BnSnapshot,
    pub w_t: TensorSnapshot,
    pub bn_t: BnSnapshot,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamsSnapshot {
    pub layers: Vec<LayerSnapshot>,
    pub head_w: TensorSnapshot,
    pub head_b: TensorSnapshot,
    pub dropout: f64,
    pub temporal_kernel: usize,
    pub n: usize,
}

fn bn_snapshot(bn: &BnState) -> BnSnapshot {
    BnSnapshot {
        gamma: TensorSnapshot::of(&bn.gamma),
        beta: TensorSnapshot::of(&bn.beta),
        running_mean: bn.running_mean.clone(),
        running_var: bn.running_var.clone(),
    }
}

fn bn_restore(s: &BnSnapshot) -> Result<BnState> {
    Ok(BnState {
        gamma: s.gamma.build(true)?,
        beta: s.beta.build(true)?,
        running_mean: s.running_mean.clone(),
        running_var: s.running_var.clone(),
        bypass: false,
    })
}

impl ModelParams {
    pub fn snapshot(&self) -> ParamsSnapshot {
        ParamsSnapshot {
            layers: self
                .layers
                .iter()
                .map(|l| LayerSnapshot {
                    w_s: TensorSnapshot::of(&l.w_s),
                    bias: TensorSnapshot::of(&l.bias),
                    bn_s: bn_snapshot(&l.bn_s),
                    w_t: TensorSnapshot::of(&l.w_t),
                    bn_t: bn_snapshot(&l.bn_t),
                })
                .collect(),
            head_w: TensorSnapshot::of(&self.head_w),
            head_b: TensorSnapshot::of(&self.head_b),
            dropout: self.dropout,
            temporal_kernel: self.temporal_kernel,
            n: self.n,
        }
    }

    pub fn restore(s: &ParamsSnapshot) -> Result<ModelParams> {
        let layers = s
            .layers
            .iter()
            .map(|l| {
                Ok(StDagcLayer {
                    w_s: l.w_s.build(true)?,
                    bias: l.bias.build(true)?,
                    bn_s: bn_restore(&l.bn_s)?,
                    w_t: l.w_t.build(true)?,
                    bn_t: bn_restore(&l.bn_t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            layers,
            head_w: s.head_w.build(true)?,
            head_b: s.head_b.build(true)?,
            dropout: s.dropout,
            temporal_kernel: s.temporal_kernel,
            n: s.n,
        })
    }
}

/// Checkpoint file: config echo, graph, and every named parameter array.
/// JSON float serialization uses shortest round-trip decimals, so the file
/// reproduces every f64 bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub n: usize,
    pub alpha: f64,
    /// adjacency as nested rows, row index = source node
    pub a: Vec<Vec<f64>>,
    pub roi_names: Vec<String>,
    pub params: ParamsSnapshot,
}

impl Checkpoint {
    pub fn new(
        config: serde_json::Value,
        graph_matrix: &[f64],
        n: usize,
        roi_names: Vec<String>,
        params: ParamsSnapshot,
    ) -> Checkpoint {
        let a = (0..n)
            .map(|j| graph_matrix[j * n..(j + 1) * n].to_vec())
            .collect();
        Checkpoint {
            config,
            n,
            alpha: 1.0 / n as f64,
            a,
            roi_names,
            params,
        }
    }

    pub fn graph_matrix(&self) -> Vec<f64> {
        self.a.iter().flatten().copied().collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Checkpoint::from_json(&text)
    }
}
