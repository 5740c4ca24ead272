//! The progressive deraining network family.
//!
//! One stage applies `f_in` (conv+ReLU), an optional convolutional LSTM/GRU,
//! a chain of ResBlocks, and `f_out` (conv). The same parameters are reused
//! at every stage; PRN omits the recurrent cell, PReNet includes it, and the
//! `_r` variants unfold a single ResBlock several times instead of storing
//! distinct blocks.

mod cells;
mod checkpoint;

pub use cells::{gru_cell, lstm_cell, RecurrentState};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_full, save_checkpoint, save_checkpoint_with_trainer,
    TrainerState,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

/// Recurrent layer selection: `None` gives the PRN family, LSTM/GRU the
/// PReNet family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    None,
    Lstm,
    Gru,
}

/// ResBlock storage: distinct blocks, or one block recursively unfolded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResBlockMode {
    Distinct,
    Recursive,
}

/// Whether each stage sees `concat(x^{t-1}, y)` or only `x^{t-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    ConcatY,
    XOnly,
}

/// Whether the head predicts a residual added to `y` or the image directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    Residual,
    Direct,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::None => "none",
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CellKind::None),
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Format(format!("unknown recurrent_cell `{other}`"))),
        }
    }
}

impl ResBlockMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ResBlockMode::Distinct => "distinct_5",
            ResBlockMode::Recursive => "recursive_1x5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "distinct_5" => Ok(ResBlockMode::Distinct),
            "recursive_1x5" => Ok(ResBlockMode::Recursive),
            other => Err(Error::Format(format!("unknown resblock_mode `{other}`"))),
        }
    }
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::ConcatY => "concat_y",
            InputMode::XOnly => "x_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat_y" => Ok(InputMode::ConcatY),
            "x_only" => Ok(InputMode::XOnly),
            other => Err(Error::Format(format!("unknown input_mode `{other}`"))),
        }
    }
}

impl OutputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputMode::Residual => "residual",
            OutputMode::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(OutputMode::Residual),
            "direct" => Ok(OutputMode::Direct),
            other => Err(Error::Format(format!("unknown output_mode `{other}`"))),
        }
    }
}

/// Full ablation space of the network family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    pub recurrent_cell: CellKind,
    pub resblock_mode: ResBlockMode,
    pub stages_t: usize,
    pub input_mode: InputMode,
    pub output_mode: OutputMode,
    pub channels: usize,
    pub resblock_count: usize,
}

impl Default for NetworkConfig {
    /// The final model: PReNet with LSTM, 5 distinct ResBlocks, T = 6,
    /// rainy-image concatenation, residual output, 32 channels.
    fn default() -> Self {
        NetworkConfig {
            recurrent_cell: CellKind::Lstm,
            resblock_mode: ResBlockMode::Distinct,
            stages_t: 6,
            input_mode: InputMode::ConcatY,
            output_mode: OutputMode::Residual,
            channels: 32,
            resblock_count: 5,
        }
    }
}

impl NetworkConfig {
    pub fn prn() -> Self {
        NetworkConfig {
            recurrent_cell: CellKind::None,
            ..Default::default()
        }
    }

    pub fn prenet() -> Self {
        NetworkConfig::default()
    }

    pub fn prn_r() -> Self {
        NetworkConfig {
            recurrent_cell: CellKind::None,
            resblock_mode: ResBlockMode::Recursive,
            ..Default::default()
        }
    }

    pub fn prenet_r() -> Self {
        NetworkConfig {
            resblock_mode: ResBlockMode::Recursive,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.stages_t == 0 {
            return Err(Error::Config("stages_t must be positive".into()));
        }
        if self.resblock_count == 0 {
            return Err(Error::Config("resblock_count must be positive".into()));
        }
        Ok(())
    }

    /// Channels entering `f_in`: 6 for concat input (RGB estimate + RGB
    /// rainy image), 3 otherwise.
    pub fn input_channels(&self) -> usize {
        match self.input_mode {
            InputMode::ConcatY => 6,
            InputMode::XOnly => 3,
        }
    }

    /// Number of distinct ResBlocks stored in the parameter set.
    pub fn stored_resblocks(&self) -> usize {
        match self.resblock_mode {
            ResBlockMode::Distinct => self.resblock_count,
            ResBlockMode::Recursive => 1,
        }
    }
}

/// One convolution's parameters. Biases are stored as (1, co, 1, 1)
/// tensors so the whole parameter set lives in the universal value type.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(ci: usize, co: usize, bias: bool) -> Self {
        ConvParams {
            weight: Tensor::zeros(Shape::new(co, ci, 3, 3)),
            bias: bias.then(|| Tensor::zeros(Shape::new(1, co, 1, 1))),
        }
    }

    fn count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

/// Two conv+ReLU layers with an identity skip connection.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlockParams<T> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
}

/// One recurrent gate: input conv with bias, hidden conv without.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    pub x: ConvParams<T>,
    pub h: ConvParams<T>,
}

/// Recurrent cell parameters; gate order is fixed (LSTM: i, f, g, o;
/// GRU: z, r, n).
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum CellParams<T> {
    Lstm {
        i: GateParams<T>,
        f: GateParams<T>,
        g: GateParams<T>,
        o: GateParams<T>,
    },
    Gru {
        z: GateParams<T>,
        r: GateParams<T>,
        n: GateParams<T>,
    },
}

/// Canonically ordered, named parameters of one network. Order is
/// f_in, res[0..], cell gates, f_out; it defines the checkpoint blob layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    pub f_in: ConvParams<T>,
    pub res: Vec<ResBlockParams<T>>,
    pub cell: Option<CellParams<T>>,
    pub f_out: ConvParams<T>,
}

impl<T: Scalar> ParameterSet<T> {
    /// All-zero parameters laid out for `config`.
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let gate = || GateParams {
            x: ConvParams::zeros(c, c, true),
            h: ConvParams::zeros(c, c, false),
        };
        Ok(ParameterSet {
            f_in: ConvParams::zeros(config.input_channels(), c, true),
            res: (0..config.stored_resblocks())
                .map(|_| ResBlockParams {
                    conv1: ConvParams::zeros(c, c, true),
                    conv2: ConvParams::zeros(c, c, true),
                })
                .collect(),
            cell: match config.recurrent_cell {
                CellKind::None => None,
                CellKind::Lstm => Some(CellParams::Lstm {
                    i: gate(),
                    f: gate(),
                    g: gate(),
                    o: gate(),
                }),
                CellKind::Gru => Some(CellParams::Gru {
                    z: gate(),
                    r: gate(),
                    n: gate(),
                }),
            },
            f_out: ConvParams::zeros(c, 3, true),
        })
    }

    /// Visits every tensor in canonical order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<T>)) {
        fn conv<'a, T>(
            name: &str,
            c: &'a ConvParams<T>,
            f: &mut impl FnMut(String, &'a Tensor<T>),
        ) {
            f(format!("{name}.w"), &c.weight);
            if let Some(b) = &c.bias {
                f(format!("{name}.b"), b);
            }
        }
        fn gate<'a, T>(
            name: &str,
            g: &'a GateParams<T>,
            f: &mut impl FnMut(String, &'a Tensor<T>),
        ) {
            conv(&format!("{name}.x"), &g.x, f);
            conv(&format!("{name}.h"), &g.h, f);
        }
        conv("f_in", &self.f_in, f);
        for (k, block) in self.res.iter().enumerate() {
            conv(&format!("res[{k}].conv1"), &block.conv1, f);
            conv(&format!("res[{k}].conv2"), &block.conv2, f);
        }
        match &self.cell {
            Some(CellParams::Lstm { i, f: fg, g, o }) => {
                gate("lstm.i", i, f);
                gate("lstm.f", fg, f);
                gate("lstm.g", g, f);
                gate("lstm.o", o, f);
            }
            Some(CellParams::Gru { z, r, n }) => {
                gate("gru.z", z, f);
                gate("gru.r", r, f);
                gate("gru.n", n, f);
            }
            None => {}
        }
        conv("f_out", &self.f_out, f);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        fn conv<T>(c: &mut ConvParams<T>, f: &mut impl FnMut(&mut Tensor<T>)) {
            f(&mut c.weight);
            if let Some(b) = &mut c.bias {
                f(b);
            }
        }
        fn gate<T>(g: &mut GateParams<T>, f: &mut impl FnMut(&mut Tensor<T>)) {
            conv(&mut g.x, f);
            conv(&mut g.h, f);
        }
        conv(&mut self.f_in, f);
        for block in &mut self.res {
            conv(&mut block.conv1, f);
            conv(&mut block.conv2, f);
        }
        match &mut self.cell {
            Some(CellParams::Lstm { i, f: fg, g, o }) => {
                gate(i, f);
                gate(fg, f);
                gate(g, f);
                gate(o, f);
            }
            Some(CellParams::Gru { z, r, n }) => {
                gate(z, f);
                gate(r, f);
                gate(n, f);
            }
            None => {}
        }
        conv(&mut self.f_out, f);
    }

    /// Total scalar count.
    pub fn total_parameters(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.numel());
        total
    }

    /// All parameters as one canonical-order vector.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.total_parameters());
        self.visit(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Overwrites every parameter from a canonical-order vector.
    pub fn assign_from_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.total_parameters() {
            return Err(Error::shape(
                "ParameterSet::assign_from_flat",
                self.total_parameters(),
                values.len(),
            ));
        }
        let mut offset = 0;
        self.visit_mut(&mut |t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        fn conv<T: Scalar, U: Scalar>(c: &ConvParams<T>) -> ConvParams<U> {
            ConvParams {
                weight: c.weight.cast::<U>(),
                bias: c.bias.as_ref().map(|b| b.cast::<U>()),
            }
        }
        fn gate<T: Scalar, U: Scalar>(g: &GateParams<T>) -> GateParams<U> {
            GateParams {
                x: conv(&g.x),
                h: conv(&g.h),
            }
        }
        ParameterSet {
            f_in: conv(&self.f_in),
            res: self
                .res
                .iter()
                .map(|b| ResBlockParams {
                    conv1: conv(&b.conv1),
                    conv2: conv(&b.conv2),
                })
                .collect(),
            cell: self.cell.as_ref().map(|c| match c {
                CellParams::Lstm { i, f, g, o } => CellParams::Lstm {
                    i: gate(i),
                    f: gate(f),
                    g: gate(g),
                    o: gate(o),
                },
                CellParams::Gru { z, r, n } => CellParams::Gru {
                    z: gate(z),
                    r: gate(r),
                    n: gate(n),
                },
            }),
            f_out: conv(&self.f_out),
        }
    }

    /// Per-component subtotals for reporting: f_in, each stored ResBlock,
    /// the recurrent cell, f_out.
    pub fn component_counts(&self) -> Vec<(String, usize)> {
        let mut out = vec![("f_in".to_string(), self.f_in.count())];
        for (k, block) in self.res.iter().enumerate() {
            out.push((
                format!("res[{k}]"),
                block.conv1.count() + block.conv2.count(),
            ));
        }
        if let Some(cell) = &self.cell {
            let gate = |g: &GateParams<T>| g.x.count() + g.h.count();
            let (name, count) = match cell {
                CellParams::Lstm { i, f, g, o } => {
                    ("lstm", gate(i) + gate(f) + gate(g) + gate(o))
                }
                CellParams::Gru { z, r, n } => ("gru", gate(z) + gate(r) + gate(n)),
            };
            out.push((name.to_string(), count));
        }
        out.push(("f_out".to_string(), self.f_out.count()));
        out
    }
}

/// Closed-form parameter count; equal to `build(..).total_parameters()` and
/// independent of `stages_t` (stages share one parameter set).
pub fn count_parameters(config: &NetworkConfig) -> usize {
    let c = config.channels;
    let conv = |ci: usize, co: usize, bias: bool| ci * co * 9 + if bias { co } else { 0 };
    let gate = conv(c, c, true) + conv(c, c, false);
    let f_in = conv(config.input_channels(), c, true);
    let res = config.stored_resblocks() * 2 * conv(c, c, true);
    let cell = match config.recurrent_cell {
        CellKind::None => 0,
        CellKind::Lstm => 4 * gate,
        CellKind::Gru => 3 * gate,
    };
    let f_out = conv(c, 3, true);
    f_in + res + cell + f_out
}

/// Allocates and initializes parameters: fan-in-scaled uniform weights
/// (bound = sqrt(1/(ci*9))), zero biases. Deterministic for a fixed seed;
/// weights are drawn in canonical order, row-major within each tensor.
pub fn build<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<ParameterSet<T>> {
    let mut params = ParameterSet::<T>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.visit_mut(&mut |t| {
        let shape = t.shape();
        if shape.h == 3 {
            // Weight tensor (co, ci, 3, 3); biases stay zero.
            let bound = T::from_f64((1.0 / (shape.c * 9) as f64).sqrt());
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
    });
    Ok(params)
}

// ── Forward ──────────────────────────────────────────────────────────

/// Tape handles for one convolution's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct ResBlockVars {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
}

#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub x: ConvVars,
    pub h: ConvVars,
}

#[derive(Debug, Clone)]
pub enum CellVars {
    Lstm {
        i: GateVars,
        f: GateVars,
        g: GateVars,
        o: GateVars,
    },
    Gru {
        z: GateVars,
        r: GateVars,
        n: GateVars,
    },
}

/// Parameter handles registered on a tape, plus the flat canonical order
/// used for gradient collection.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub f_in: ConvVars,
    pub res: Vec<ResBlockVars>,
    pub cell: Option<CellVars>,
    pub f_out: ConvVars,
    ordered: Vec<Var>,
}

fn register_conv<T: Scalar>(
    tape: &mut Tape<T>,
    c: &ConvParams<T>,
    trainable: bool,
    ordered: &mut Vec<Var>,
) -> ConvVars {
    let weight = tape.leaf(c.weight.clone(), trainable);
    ordered.push(weight);
    let bias = c.bias.as_ref().map(|b| {
        let v = tape.leaf(b.clone(), trainable);
        ordered.push(v);
        v
    });
    ConvVars { weight, bias }
}

fn register_gate<T: Scalar>(
    tape: &mut Tape<T>,
    g: &GateParams<T>,
    trainable: bool,
    ordered: &mut Vec<Var>,
) -> GateVars {
    GateVars {
        x: register_conv(tape, &g.x, trainable, ordered),
        h: register_conv(tape, &g.h, trainable, ordered),
    }
}

pub(crate) fn register_cell_with_order<T: Scalar>(
    tape: &mut Tape<T>,
    cell: &CellParams<T>,
    trainable: bool,
    ordered: &mut Vec<Var>,
) -> CellVars {
    match cell {
        CellParams::Lstm { i, f, g, o } => CellVars::Lstm {
            i: register_gate(tape, i, trainable, ordered),
            f: register_gate(tape, f, trainable, ordered),
            g: register_gate(tape, g, trainable, ordered),
            o: register_gate(tape, o, trainable, ordered),
        },
        CellParams::Gru { z, r, n } => CellVars::Gru {
            z: register_gate(tape, z, trainable, ordered),
            r: register_gate(tape, r, trainable, ordered),
            n: register_gate(tape, n, trainable, ordered),
        },
    }
}

/// Registers only a recurrent cell's parameters on a tape.
pub(crate) fn register_cell_params<T: Scalar>(
    tape: &mut Tape<T>,
    cell: &CellParams<T>,
    trainable: bool,
) -> CellVars {
    let mut ordered = Vec::new();
    register_cell_with_order(tape, cell, trainable, &mut ordered)
}

/// Copies every parameter onto the tape as leaves; `trainable` controls
/// whether gradients are collected for them.
pub fn register_params<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParameterSet<T>,
    trainable: bool,
) -> ParamVars {
    let mut ordered = Vec::new();
    let f_in = register_conv(tape, &params.f_in, trainable, &mut ordered);
    let res = params
        .res
        .iter()
        .map(|b| ResBlockVars {
            conv1: register_conv(tape, &b.conv1, trainable, &mut ordered),
            conv2: register_conv(tape, &b.conv2, trainable, &mut ordered),
        })
        .collect();
    let cell = params
        .cell
        .as_ref()
        .map(|c| register_cell_with_order(tape, c, trainable, &mut ordered));
    let f_out = register_conv(tape, &params.f_out, trainable, &mut ordered);
    ParamVars {
        f_in,
        res,
        cell,
        f_out,
        ordered,
    }
}

impl ParamVars {
    /// Gradients in canonical order as one flat vector; parameters the
    /// backward pass never reached contribute zeros.
    pub fn collect_gradients<T: Scalar>(&self, tape: &Tape<T>) -> Vec<T> {
        let mut out = Vec::new();
        for &v in &self.ordered {
            match tape.grad(v) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(T::zero(), tape.value(v).numel())),
            }
        }
        out
    }
}

/// Ordered per-stage estimates x^1..x^T from one forward pass. When the
/// run is truncated with `stop_at_stage = t`, only the first `t` entries
/// exist and they are bit-identical to the full run's prefix.
#[derive(Debug, Clone)]
pub struct StageTrace<T> {
    pub estimates: Vec<Tensor<T>>,
    pub residuals: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> StageTrace<T> {
    pub fn final_estimate(&self) -> &Tensor<T> {
        self.estimates.last().expect("trace has at least one stage")
    }
}

/// Stage estimates as tape handles, for composing losses.
#[derive(Debug, Clone)]
pub struct TraceVars {
    pub estimates: Vec<Var>,
    pub residuals: Option<Vec<Var>>,
}

fn apply_conv<T: Scalar>(tape: &mut Tape<T>, c: ConvVars, x: Var) -> Result<Var> {
    tape.conv2d(x, c.weight, c.bias)
}

fn apply_resblock<T: Scalar>(tape: &mut Tape<T>, b: ResBlockVars, x: Var) -> Result<Var> {
    let t = apply_conv(tape, b.conv1, x)?;
    let t = tape.relu(t);
    let t = apply_conv(tape, b.conv2, t)?;
    let t = tape.relu(t);
    let s = tape.add(t, x)?;
    Ok(tape.relu(s))
}

pub(crate) struct StateVars {
    pub(crate) h: Var,
    pub(crate) c: Var,
}

fn gate_preact<T: Scalar>(tape: &mut Tape<T>, g: GateVars, x: Var, h: Var) -> Result<Var> {
    let xa = apply_conv(tape, g.x, x)?;
    let ha = apply_conv(tape, g.h, h)?;
    tape.add(xa, ha)
}

fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    i: GateVars,
    f: GateVars,
    g: GateVars,
    o: GateVars,
    state: StateVars,
    x: Var,
) -> Result<StateVars> {
    let iv = gate_preact(tape, i, x, state.h)?;
    let iv = tape.sigmoid(iv);
    let fv = gate_preact(tape, f, x, state.h)?;
    let fv = tape.sigmoid(fv);
    let gv = gate_preact(tape, g, x, state.h)?;
    let gv = tape.tanh(gv);
    let ov = gate_preact(tape, o, x, state.h)?;
    let ov = tape.sigmoid(ov);
    let fc = tape.mul(fv, state.c)?;
    let ig = tape.mul(iv, gv)?;
    let c_new = tape.add(fc, ig)?;
    let ct = tape.tanh(c_new);
    let h_new = tape.mul(ov, ct)?;
    Ok(StateVars { h: h_new, c: c_new })
}

fn gru_step<T: Scalar>(
    tape: &mut Tape<T>,
    z: GateVars,
    r: GateVars,
    n: GateVars,
    state: StateVars,
    x: Var,
) -> Result<StateVars> {
    let zv = gate_preact(tape, z, x, state.h)?;
    let zv = tape.sigmoid(zv);
    let rv = gate_preact(tape, r, x, state.h)?;
    let rv = tape.sigmoid(rv);
    // Candidate applies the reset gate to the hidden contribution.
    let nx = apply_conv(tape, n.x, x)?;
    let nh = apply_conv(tape, n.h, state.h)?;
    let rnh = tape.mul(rv, nh)?;
    let nv = tape.add(nx, rnh)?;
    let nv = tape.tanh(nv);
    // h' = (1 - z) * h + z * n
    let neg_z = tape.scale(zv, -T::one());
    let one_minus_z = tape.add_scalar(neg_z, T::one());
    let keep = tape.mul(one_minus_z, state.h)?;
    let update = tape.mul(zv, nv)?;
    let h_new = tape.add(keep, update)?;
    Ok(StateVars {
        h: h_new,
        c: state.c,
    })
}

/// One recurrent step on an existing tape, for the cell-level API.
pub(crate) fn cell_step<T: Scalar>(
    tape: &mut Tape<T>,
    cell: &CellVars,
    state: StateVars,
    x: Var,
) -> Result<StateVars> {
    match cell {
        CellVars::Lstm { i, f, g, o } => lstm_step(tape, *i, *f, *g, *o, state, x),
        CellVars::Gru { z, r, n } => gru_step(tape, *z, *r, *n, state, x),
    }
}

/// Runs the progressive recursion on an existing tape. `y` must be a
/// 3-channel image batch; `stop_at_stage`, when given, truncates the run
/// after that many stages.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamVars,
    config: &NetworkConfig,
    y: Var,
    stop_at_stage: Option<usize>,
) -> Result<TraceVars> {
    config.validate()?;
    let y_shape = tape.value(y).shape();
    if y_shape.c != 3 {
        return Err(Error::shape(
            "forward input",
            "3-channel image batch",
            y_shape,
        ));
    }
    let stages = match stop_at_stage {
        Some(t) if t < 1 || t > config.stages_t => {
            return Err(Error::Contract(format!(
                "stop_at_stage {t} outside 1..={}",
                config.stages_t
            )));
        }
        Some(t) => t,
        None => config.stages_t,
    };

    let state_shape = Shape::new(y_shape.n, config.channels, y_shape.h, y_shape.w);
    let mut state = params.cell.as_ref().map(|_| StateVars {
        h: tape.constant(Tensor::zeros(state_shape)),
        c: tape.constant(Tensor::zeros(state_shape)),
    });

    let mut estimates = Vec::with_capacity(stages);
    let mut residuals =
        matches!(config.output_mode, OutputMode::Residual).then(|| Vec::with_capacity(stages));
    let mut x = y; // x^0 = y seeds the recursion
    for _ in 0..stages {
        let inp = match config.input_mode {
            InputMode::ConcatY => tape.concat_channels(x, y)?,
            InputMode::XOnly => x,
        };
        let z = apply_conv(tape, params.f_in, inp)?;
        let z = tape.relu(z);

        let features = match &params.cell {
            None => z,
            Some(cell) => {
                let prev = state.take().expect("state exists when cell is present");
                let next = cell_step(tape, cell, prev, z)?;
                let h = next.h;
                state = Some(next);
                h
            }
        };

        let mut feat = features;
        match config.resblock_mode {
            ResBlockMode::Distinct => {
                for block in &params.res {
                    feat = apply_resblock(tape, *block, feat)?;
                }
            }
            ResBlockMode::Recursive => {
                for _ in 0..config.resblock_count {
                    feat = apply_resblock(tape, params.res[0], feat)?;
                }
            }
        }

        let r = apply_conv(tape, params.f_out, feat)?;
        x = match config.output_mode {
            OutputMode::Residual => tape.add(y, r)?,
            OutputMode::Direct => r,
        };
        if let Some(res) = residuals.as_mut() {
            res.push(r);
        }
        estimates.push(x);
    }

    Ok(TraceVars {
        estimates,
        residuals,
    })
}

/// Convenience inference: runs the recursion on a fresh tape and returns
/// owned stage estimates.
pub fn forward<T: Scalar>(
    params: &ParameterSet<T>,
    config: &NetworkConfig,
    y: &Tensor<T>,
    stop_at_stage: Option<usize>,
) -> Result<StageTrace<T>> {
    let mut tape = Tape::new();
    let pv = register_params(&mut tape, params, false);
    let yv = tape.leaf(y.clone(), false);
    let trace = forward_on_tape(&mut tape, &pv, config, yv, stop_at_stage)?;
    Ok(StageTrace {
        estimates: trace
            .estimates
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
        residuals: trace
            .residuals
            .map(|rs| rs.iter().map(|&v| tape.value(v).clone()).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_image(shape: Shape, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            shape,
            (0..shape.numel()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parameter_counts_match_published_table() {
        assert_eq!(count_parameters(&NetworkConfig::prn()), 95_107);
        assert_eq!(count_parameters(&NetworkConfig::prenet()), 168_963);
        assert_eq!(count_parameters(&NetworkConfig::prn_r()), 21_123);
        assert_eq!(count_parameters(&NetworkConfig::prenet_r()), 94_979);
    }

    #[test]
    fn gru_count_is_three_gates_over_prn() {
        let cfg = NetworkConfig {
            recurrent_cell: CellKind::Gru,
            ..NetworkConfig::default()
        };
        // 95,107 + 3 * (32*32*9 + 32 + 32*32*9)
        assert_eq!(count_parameters(&cfg), 150_499);
    }

    #[test]
    fn lstm_subtotal_matches_table_difference() {
        let prenet = count_parameters(&NetworkConfig::prenet());
        let prn = count_parameters(&NetworkConfig::prn());
        assert_eq!(prenet - prn, 73_856);
        let params = build::<f32>(&NetworkConfig::prenet(), 0).unwrap();
        let lstm = params
            .component_counts()
            .into_iter()
            .find(|(n, _)| n == "lstm")
            .unwrap()
            .1;
        assert_eq!(lstm, 73_856);
    }

    #[test]
    fn count_is_independent_of_stages() {
        for t in 1..10 {
            let cfg = NetworkConfig {
                stages_t: t,
                ..NetworkConfig::prenet()
            };
            assert_eq!(count_parameters(&cfg), 168_963);
        }
    }

    #[test]
    fn build_total_matches_closed_form() {
        for cfg in [
            NetworkConfig::prn(),
            NetworkConfig::prenet(),
            NetworkConfig::prn_r(),
            NetworkConfig::prenet_r(),
        ] {
            let params = build::<f32>(&cfg, 7).unwrap();
            assert_eq!(params.total_parameters(), count_parameters(&cfg));
        }
    }

    #[test]
    fn build_is_seed_deterministic() {
        let cfg = NetworkConfig::prenet_r();
        let a = build::<f32>(&cfg, 42).unwrap();
        let b = build::<f32>(&cfg, 42).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = build::<f32>(&cfg, 43).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = NetworkConfig {
            channels: 0,
            ..NetworkConfig::default()
        };
        assert!(matches!(build::<f32>(&cfg, 0), Err(Error::Config(_))));
        let cfg = NetworkConfig {
            stages_t: 0,
            ..NetworkConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_in_residual_mode_returns_input_every_stage() {
        let cfg = NetworkConfig {
            stages_t: 3,
            channels: 8,
            resblock_count: 2,
            ..NetworkConfig::prenet()
        };
        let mut params = build::<f32>(&cfg, 1).unwrap();
        params.f_out = ConvParams::zeros(cfg.channels, 3, true);
        let y = rand_image(Shape::new(2, 3, 9, 7), 2);
        let trace = forward(&params, &cfg, &y, None).unwrap();
        assert_eq!(trace.estimates.len(), 3);
        for est in &trace.estimates {
            assert!(est.bit_eq(&y));
        }
        for r in trace.residuals.as_ref().unwrap() {
            assert!(r.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn all_zero_lstm_yields_zero_state() {
        // i = f = o = 0.5, g = 0 -> c = 0, h = 0.5 * tanh(0) = 0.
        let cfg = NetworkConfig {
            stages_t: 1,
            channels: 4,
            resblock_count: 1,
            ..NetworkConfig::prenet()
        };
        let params = ParameterSet::<f32>::zeros(&cfg).unwrap();
        let state = RecurrentState::zeros(1, 4, 5, 5);
        let x = Tensor::zeros(Shape::new(1, 4, 5, 5));
        let next = lstm_cell(params.cell.as_ref().unwrap(), &state, &x).unwrap();
        assert!(next.h.data().iter().all(|&v| v == 0.0));
        assert!(next.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stop_at_stage_is_a_bitwise_prefix() {
        let cfg = NetworkConfig {
            channels: 8,
            resblock_count: 2,
            stages_t: 4,
            ..NetworkConfig::prenet()
        };
        let params = build::<f32>(&cfg, 3).unwrap();
        let y = rand_image(Shape::new(1, 3, 12, 10), 4);
        let full = forward(&params, &cfg, &y, None).unwrap();
        for t in 1..=4 {
            let truncated = forward(&params, &cfg, &y, Some(t)).unwrap();
            assert_eq!(truncated.estimates.len(), t);
            for (a, b) in truncated.estimates.iter().zip(&full.estimates) {
                assert!(a.bit_eq(b));
            }
        }
    }

    #[test]
    fn stop_at_stage_out_of_range_is_contract_error() {
        let cfg = NetworkConfig {
            channels: 4,
            resblock_count: 1,
            stages_t: 2,
            ..NetworkConfig::prn()
        };
        let params = build::<f32>(&cfg, 0).unwrap();
        let y = rand_image(Shape::new(1, 3, 4, 4), 0);
        assert!(matches!(
            forward(&params, &cfg, &y, Some(0)),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            forward(&params, &cfg, &y, Some(3)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn non_rgb_input_is_shape_error() {
        let cfg = NetworkConfig::prn();
        let params = build::<f32>(&cfg, 0).unwrap();
        let y = Tensor::zeros(Shape::new(1, 4, 8, 8));
        assert!(matches!(
            forward(&params, &cfg, &y, None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn ablation_variants_all_run() {
        // Every cell/input/output combination forwards cleanly and obeys
        // its contract on trace shape and residual presence.
        for cell in [CellKind::None, CellKind::Lstm, CellKind::Gru] {
            for input_mode in [InputMode::ConcatY, InputMode::XOnly] {
                for output_mode in [OutputMode::Residual, OutputMode::Direct] {
                    let cfg = NetworkConfig {
                        recurrent_cell: cell,
                        input_mode,
                        output_mode,
                        channels: 6,
                        resblock_count: 2,
                        stages_t: 2,
                        ..NetworkConfig::default()
                    };
                    let params = build::<f32>(&cfg, 13).unwrap();
                    let y = rand_image(Shape::new(1, 3, 10, 8), 14);
                    let trace = forward(&params, &cfg, &y, None).unwrap();
                    assert_eq!(trace.estimates.len(), 2);
                    for est in &trace.estimates {
                        assert_eq!(est.shape(), y.shape());
                        assert!(est.is_finite());
                    }
                    assert_eq!(
                        trace.residuals.is_some(),
                        output_mode == OutputMode::Residual
                    );
                    let again = forward(&params, &cfg, &y, None).unwrap();
                    assert!(trace.final_estimate().bit_eq(again.final_estimate()));
                }
            }
        }
    }

    #[test]
    fn recursive_mode_matches_distinct_blocks_with_identical_weights() {
        let distinct_cfg = NetworkConfig {
            channels: 8,
            resblock_count: 3,
            stages_t: 2,
            recurrent_cell: CellKind::None,
            ..NetworkConfig::default()
        };
        let recursive_cfg = NetworkConfig {
            resblock_mode: ResBlockMode::Recursive,
            ..distinct_cfg
        };
        let rec_params = build::<f32>(&recursive_cfg, 9).unwrap();
        let mut dist_params = ParameterSet::<f32>::zeros(&distinct_cfg).unwrap();
        dist_params.f_in = rec_params.f_in.clone();
        dist_params.f_out = rec_params.f_out.clone();
        for block in &mut dist_params.res {
            *block = rec_params.res[0].clone();
        }
        let y = rand_image(Shape::new(1, 3, 8, 8), 10);
        let a = forward(&rec_params, &recursive_cfg, &y, None).unwrap();
        let b = forward(&dist_params, &distinct_cfg, &y, None).unwrap();
        for (ea, eb) in a.estimates.iter().zip(&b.estimates) {
            assert!(ea.bit_eq(eb));
        }
    }
}
