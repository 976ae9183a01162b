//! The four architectures: MLP, ConvGRU, Bi-ConvGRU, and a width-scalable
//! ResNet-18, with Task-IL multi-head / Class-IL shared-head routing,
//! penultimate-activation probes, and weight-eRank layer grouping.
//!
//! Recurrent cells sweep the final feature map along the row axis: each
//! spatial row is one timestep, which gives bidirectionality a concrete
//! meaning on static images.

use crate::data::IlMode;
use crate::error::{Error, Result};
use crate::linalg::matricize_conv_kernel;
use crate::nn::{init_uniform, seeded_rng, ParamId, ParamSet, Parameter, Trace};
use crate::tape::{RunningStats, Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    ConvGru,
    BiConvGru,
    Resnet,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::ConvGru => "convgru",
            Arch::BiConvGru => "bi_convgru",
            Arch::Resnet => "resnet",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "convgru" => Ok(Arch::ConvGru),
            "bi_convgru" => Ok(Arch::BiConvGru),
            "resnet" => Ok(Arch::Resnet),
            other => Err(Error::Config(format!("unknown architecture {other}"))),
        }
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub il_mode: IlMode,
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    /// Task-IL: number of heads. Class-IL: length of the task sequence
    /// (no structural effect).
    pub n_tasks: usize,
    /// Output width of each Task-IL head.
    pub classes_per_task: usize,
    /// Width of the single pre-allocated Class-IL head.
    pub total_classes: usize,
    pub mlp_hidden: usize,
    /// Feature-extractor channel plan for the ConvGRU variants.
    pub conv_channels: Vec<usize>,
    /// Hidden channels of each ConvGRU cell.
    pub gru_hidden: usize,
    /// ResNet stage widths (64, 128, 256, 512) are multiplied by this.
    pub width_factor: f64,
}

impl ModelSpec {
    pub fn mnist_mlp() -> Self {
        ModelSpec {
            arch: Arch::Mlp,
            il_mode: IlMode::TaskIl,
            in_channels: 1,
            in_height: 28,
            in_width: 28,
            n_tasks: 5,
            classes_per_task: 2,
            total_classes: 10,
            mlp_hidden: 64,
            conv_channels: vec![],
            gru_hidden: 0,
            width_factor: 1.0,
        }
    }

    pub fn mnist_convgru() -> Self {
        ModelSpec {
            arch: Arch::ConvGru,
            conv_channels: vec![16, 32, 32, 64],
            gru_hidden: 64,
            mlp_hidden: 0,
            ..Self::mnist_mlp()
        }
    }

    pub fn cifar_resnet(width_factor: f64, n_tasks: usize, total_classes: usize) -> Self {
        ModelSpec {
            arch: Arch::Resnet,
            il_mode: IlMode::ClassIl,
            in_channels: 3,
            in_height: 32,
            in_width: 32,
            n_tasks,
            classes_per_task: 0,
            total_classes,
            mlp_hidden: 0,
            conv_channels: vec![],
            gru_hidden: 0,
            width_factor,
        }
    }

    pub fn cifar_bi_convgru(n_tasks: usize, total_classes: usize) -> Self {
        ModelSpec {
            arch: Arch::BiConvGru,
            conv_channels: vec![16, 32, 32, 64],
            gru_hidden: 64,
            ..Self::cifar_resnet(1.0, n_tasks, total_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.il_mode {
            IlMode::TaskIl => {
                if self.n_tasks == 0 || self.classes_per_task < 2 {
                    return Err(Error::Config(format!(
                        "Task-IL needs n_tasks >= 1 and classes_per_task >= 2 \
                         (got {} and {})",
                        self.n_tasks, self.classes_per_task
                    )));
                }
            }
            IlMode::ClassIl => {
                if self.total_classes < 2 {
                    return Err(Error::Config(format!(
                        "Class-IL needs total_classes >= 2 (got {})",
                        self.total_classes
                    )));
                }
                if self.classes_per_task != 0 {
                    return Err(Error::Config(
                        "Class-IL uses one shared head; per-task head width must be 0".into(),
                    ));
                }
            }
        }
        match self.arch {
            Arch::Mlp => {
                if self.mlp_hidden == 0 {
                    return Err(Error::Config("mlp_hidden must be >= 1".into()));
                }
            }
            Arch::ConvGru | Arch::BiConvGru => {
                if self.conv_channels.is_empty() || self.gru_hidden == 0 {
                    return Err(Error::Config(
                        "ConvGRU variants need conv_channels and gru_hidden".into(),
                    ));
                }
            }
            Arch::Resnet => {
                if !(self.width_factor > 0.0) {
                    return Err(Error::Config(format!(
                        "resnet width_factor must be positive, got {}",
                        self.width_factor
                    )));
                }
            }
        }
        if self.in_channels == 0 || self.in_height == 0 || self.in_width == 0 {
            return Err(Error::Config("input dimensions must be nonzero".into()));
        }
        Ok(())
    }

    /// Stage widths (64, 128, 256, 512) scaled by the width factor.
    pub fn resnet_widths(&self) -> [usize; 4] {
        let w = |base: f64| ((base * self.width_factor).round() as usize).max(1);
        [w(64.0), w(128.0), w(256.0), w(512.0)]
    }

    /// Dimension of the penultimate representation (the head's input).
    pub fn head_input_dim(&self) -> usize {
        match self.arch {
            Arch::Mlp => self.mlp_hidden,
            Arch::ConvGru => self.gru_hidden,
            Arch::BiConvGru => 2 * self.gru_hidden,
            Arch::Resnet => self.resnet_widths()[3],
        }
    }

    fn head_names(&self) -> Vec<(String, usize)> {
        match self.il_mode {
            IlMode::TaskIl => (1..=self.n_tasks)
                .map(|t| (format!("head{t}"), self.classes_per_task))
                .collect(),
            IlMode::ClassIl => vec![("head".to_string(), self.total_classes)],
        }
    }
}

/// eRank layer groups. MLP and ConvGRU have no `Late` group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Early,
    Middle,
    Late,
    Head,
}

impl Group {
    pub fn name(&self) -> &'static str {
        match self {
            Group::Early => "early",
            Group::Middle => "middle",
            Group::Late => "late",
            Group::Head => "head",
        }
    }
}

/// group -> names of the weight matrices it contains (biases and
/// normalization scales excluded).
pub type LayerGroupMap = BTreeMap<Group, Vec<String>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Head routing: Task-IL selects a head by 1-based task id; Class-IL
/// restricts the shared head to the classes seen so far.
#[derive(Debug, Clone)]
pub enum Routing<'a> {
    TaskIl { task_id: usize },
    ClassIl { seen: &'a [usize] },
}

/// A recorded forward pass: the trace (for backward), the penultimate
/// representation, the head logits, and the Class-IL class mask.
pub struct ForwardPass {
    pub trace: Trace,
    pub penultimate: Var,
    pub logits: Var,
    /// `mask[c]` is true when class `c` participates in the softmax.
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamSet,
    ids: BTreeMap<String, ParamId>,
    /// Batch-norm running statistics, in the order the layers are built.
    pub running: Vec<RunningStats>,
}

// ---------------------------------------------------------------------
// construction

struct Builder {
    params: ParamSet,
    ids: BTreeMap<String, ParamId>,
    running: Vec<RunningStats>,
    seed: u64,
}

impl Builder {
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let t = init_uniform(shape, fan_in, &mut seeded_rng(self.seed, name));
        let id = self.params.add(Parameter::new(name, t));
        self.ids.insert(name.to_string(), id);
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f64) {
        let id = self.params.add(Parameter::new(name, Tensor::full(shape, v)));
        self.ids.insert(name.to_string(), id);
    }

    fn bn(&mut self, prefix: &str, channels: usize) {
        self.constant(&format!("{prefix}_g"), &[channels], 1.0);
        self.constant(&format!("{prefix}_b"), &[channels], 0.0);
        self.running.push(RunningStats::new(channels));
    }

    fn gru_cell(&mut self, prefix: &str, in_ch: usize, hid: usize) {
        let xfan = in_ch * 9;
        let hfan = hid * 9;
        for gate in ["r", "z", "h"] {
            self.weight(&format!("{prefix}_w{gate}"), &[hid, in_ch, 3, 3], xfan);
            self.weight(&format!("{prefix}_u{gate}"), &[hid, hid, 3, 3], hfan);
            self.constant(&format!("{prefix}_b{gate}"), &[hid], 0.0);
        }
    }
}

/// Builds a model with parameters drawn deterministically from `seed`
/// (each parameter from its own derived stream, so adding a layer does not
/// reshuffle the others).
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut b = Builder {
        params: ParamSet::new(),
        ids: BTreeMap::new(),
        running: Vec::new(),
        seed,
    };
    match spec.arch {
        Arch::Mlp => {
            let d = spec.in_channels * spec.in_height * spec.in_width;
            let h = spec.mlp_hidden;
            b.weight("fc1_w", &[d, h], d);
            b.constant("fc1_b", &[h], 0.0);
            b.weight("fc2_w", &[h, h], h);
            b.constant("fc2_b", &[h], 0.0);
        }
        Arch::ConvGru | Arch::BiConvGru => {
            let mut c_in = spec.in_channels;
            for (i, &c_out) in spec.conv_channels.iter().enumerate() {
                b.weight(&format!("conv{}_w", i + 1), &[c_out, c_in, 3, 3], c_in * 9);
                b.constant(&format!("conv{}_b", i + 1), &[c_out], 0.0);
                c_in = c_out;
            }
            if spec.arch == Arch::ConvGru {
                b.gru_cell("gru", c_in, spec.gru_hidden);
            } else {
                b.gru_cell("gru_fwd", c_in, spec.gru_hidden);
                b.gru_cell("gru_bwd", c_in, spec.gru_hidden);
            }
        }
        Arch::Resnet => {
            let w = spec.resnet_widths();
            b.weight("stem_w", &[w[0], spec.in_channels, 3, 3], spec.in_channels * 9);
            b.bn("stem_bn", w[0]);
            let mut c_in = w[0];
            for (s, &c_out) in w.iter().enumerate() {
                for blk in 0..2 {
                    let p = format!("s{}b{}", s + 1, blk + 1);
                    let stride = if s > 0 && blk == 0 { 2 } else { 1 };
                    b.weight(&format!("{p}_conv1_w"), &[c_out, c_in, 3, 3], c_in * 9);
                    b.bn(&format!("{p}_bn1"), c_out);
                    b.weight(&format!("{p}_conv2_w"), &[c_out, c_out, 3, 3], c_out * 9);
                    b.bn(&format!("{p}_bn2"), c_out);
                    if stride != 1 || c_in != c_out {
                        b.weight(&format!("{p}_down_w"), &[c_out, c_in, 1, 1], c_in);
                        b.bn(&format!("{p}_down_bn"), c_out);
                    }
                    c_in = c_out;
                }
            }
        }
    }
    let d = spec.head_input_dim();
    for (name, out) in spec.head_names() {
        b.weight(&format!("{name}_w"), &[d, out], d);
        b.constant(&format!("{name}_b"), &[out], 0.0);
    }
    Ok(Model {
        spec: spec.clone(),
        params: b.params,
        ids: b.ids,
        running: b.running,
    })
}

// ---------------------------------------------------------------------
// ConvGRU cell

/// One cell's gate weights bound onto a tape.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wh: Var,
    pub uh: Var,
    pub bh: Var,
}

/// r = σ(Wr*x + Ur*h + br); z = σ(Wz*x + Uz*h + bz);
/// h̃ = tanh(Wh*x + Uh*(r⊙h) + bh); h' = (1−z)⊙h + z⊙h̃.
/// All gate convolutions are 3×3 with same padding.
pub fn gru_step(tape: &mut Tape, g: &GateVars, x: Var, h: Var) -> Result<Var> {
    let gate = |tape: &mut Tape, wx: Var, uh_in: Var, w: Var, u: Var, bias: Var| -> Result<Var> {
        let a = tape.conv2d(wx, w, 1, 1)?;
        let b = tape.conv2d(uh_in, u, 1, 1)?;
        let s = tape.add(a, b)?;
        tape.add_chan_bias(s, bias)
    };
    let r = {
        let s = gate(tape, x, h, g.wr, g.ur, g.br)?;
        tape.sigmoid(s)
    };
    let z = {
        let s = gate(tape, x, h, g.wz, g.uz, g.bz)?;
        tape.sigmoid(s)
    };
    let rh = tape.mul(r, h)?;
    let htilde = {
        let s = gate(tape, x, rh, g.wh, g.uh, g.bh)?;
        tape.tanh(s)
    };
    let keep = tape.affine(z, -1.0, 1.0); // 1 - z
    let old = tape.mul(keep, h)?;
    let new = tape.mul(z, htilde)?;
    tape.add(old, new)
}

/// Sweeps the cell over the row axis of `feats` [N, C, H, W] from a zero
/// hidden state, returning the stacked per-row hidden states
/// [N, C_h, H, W]. `reverse` sweeps bottom→top; outputs always sit at
/// their source row.
pub fn gru_sweep(
    tape: &mut Tape,
    g: &GateVars,
    feats: Var,
    hidden_ch: usize,
    reverse: bool,
) -> Result<Var> {
    let shape = tape.value(feats).shape.clone();
    if shape.len() != 4 || shape[2] < 1 {
        return Err(Error::Dimension(format!(
            "gru_sweep expects [N, C, H>=1, W], got {shape:?}"
        )));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let mut state = tape.input(&Tensor::zeros(&[n, hidden_ch, 1, w]));
    let mut outputs = vec![None; h];
    let rows: Vec<usize> = if reverse { (0..h).rev().collect() } else { (0..h).collect() };
    for row in rows {
        let xt = tape.slice_row(feats, row)?;
        state = gru_step(tape, g, xt, state)?;
        outputs[row] = Some(state);
    }
    let slices: Vec<Var> = outputs.into_iter().map(|o| o.unwrap()).collect();
    tape.stack_rows(&slices)
}

/// One ConvGRU cell's weights as plain tensors (kernel layout
/// [C_h, C_in, 3, 3] for W, [C_h, C_h, 3, 3] for U, bias [C_h]).
#[derive(Debug, Clone)]
pub struct GruCellWeights {
    pub wr: Tensor,
    pub ur: Tensor,
    pub br: Tensor,
    pub wz: Tensor,
    pub uz: Tensor,
    pub bz: Tensor,
    pub wh: Tensor,
    pub uh: Tensor,
    pub bh: Tensor,
}

impl GruCellWeights {
    fn bind(&self, tape: &mut Tape) -> GateVars {
        GateVars {
            wr: tape.input(&self.wr),
            ur: tape.input(&self.ur),
            br: tape.input(&self.br),
            wz: tape.input(&self.wz),
            uz: tape.input(&self.uz),
            bz: tape.input(&self.bz),
            wh: tape.input(&self.wh),
            uh: tape.input(&self.uh),
            bh: tape.input(&self.bh),
        }
    }

    pub fn hidden_channels(&self) -> usize {
        self.br.numel()
    }
}

/// Evaluates one cell step on plain tensors (no gradients).
pub fn convgru_cell_step(x: &Tensor, h_prev: &Tensor, w: &GruCellWeights) -> Result<Tensor> {
    if x.rank() != 4 || h_prev.rank() != 4 || x.dim(2) != h_prev.dim(2) || x.dim(3) != h_prev.dim(3)
    {
        return Err(Error::Dimension(format!(
            "convgru_cell_step: x {:?} and h_prev {:?} must be spatially aligned 4-D tensors",
            x.shape, h_prev.shape
        )));
    }
    let mut tape = Tape::new();
    let g = w.bind(&mut tape);
    let xv = tape.input(x);
    let hv = tape.input(h_prev);
    let out = gru_step(&mut tape, &g, xv, hv)?;
    Ok(tape.value(out).clone())
}

/// Forward cell top→bottom, backward cell bottom→top, per-row outputs
/// re-stacked and channel-concatenated: [N, C, H, W] -> [N, 2·C_h, H, W].
pub fn bidirectional_sweep(
    features: &Tensor,
    fwd: &GruCellWeights,
    bwd: &GruCellWeights,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.input(features);
    let gf = fwd.bind(&mut tape);
    let gb = bwd.bind(&mut tape);
    let a = gru_sweep(&mut tape, &gf, f, fwd.hidden_channels(), false)?;
    let b = gru_sweep(&mut tape, &gb, f, bwd.hidden_channels(), true)?;
    let out = tape.concat_channels(&[a, b])?;
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------------
// forward

/// Binds a parameter for the given mode: trainable leaf in Train mode,
/// constant input in Eval mode (no gradient recording).
fn bind(
    params: &ParamSet,
    ids: &BTreeMap<String, ParamId>,
    tr: &mut Trace,
    name: &str,
    mode: Mode,
) -> Var {
    let id = *ids
        .get(name)
        .unwrap_or_else(|| panic!("unknown parameter {name}"));
    match mode {
        Mode::Train => tr.use_param(params, id),
        Mode::Eval => tr.tape.input(&params.get(id).value),
    }
}

impl Model {
    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = &self.spec;
        if x.rank() != 4
            || x.dim(1) != s.in_channels
            || x.dim(2) != s.in_height
            || x.dim(3) != s.in_width
        {
            return Err(Error::Dimension(format!(
                "input {:?} does not match expected [N, {}, {}, {}]",
                x.shape, s.in_channels, s.in_height, s.in_width
            )));
        }
        Ok(())
    }

    /// Records the feature path onto `tr`, returning the penultimate
    /// representation [N, d] (the head's input).
    pub fn features(&mut self, tr: &mut Trace, x: &Tensor, mode: Mode) -> Result<Var> {
        self.check_input(x)?;
        let Model {
            spec,
            params,
            ids,
            running,
        } = self;
        let train = mode == Mode::Train;
        let xin = tr.tape.input(x);
        match spec.arch {
            Arch::Mlp => {
                let n = x.dim(0);
                let d = spec.in_channels * spec.in_height * spec.in_width;
                let flat = tr.tape.reshape(xin, vec![n, d])?;
                let mut cur = flat;
                for layer in ["fc1", "fc2"] {
                    let w = bind(params, ids, tr, &format!("{layer}_w"), mode);
                    let b = bind(params, ids, tr, &format!("{layer}_b"), mode);
                    let z = tr.tape.matmul(cur, w)?;
                    let z = tr.tape.add_row_bias(z, b)?;
                    cur = tr.tape.relu(z);
                }
                Ok(cur)
            }
            Arch::ConvGru | Arch::BiConvGru => {
                let mut cur = xin;
                for i in 1..=spec.conv_channels.len() {
                    let w = bind(params, ids, tr, &format!("conv{i}_w"), mode);
                    let b = bind(params, ids, tr, &format!("conv{i}_b"), mode);
                    let z = tr.tape.conv2d(cur, w, 1, 1)?;
                    let z = tr.tape.add_chan_bias(z, b)?;
                    cur = tr.tape.relu(z);
                }
                let hid = spec.gru_hidden;
                let cell = |tr: &mut Trace, prefix: &str| GateVars {
                    wr: bind(params, ids, tr, &format!("{prefix}_wr"), mode),
                    ur: bind(params, ids, tr, &format!("{prefix}_ur"), mode),
                    br: bind(params, ids, tr, &format!("{prefix}_br"), mode),
                    wz: bind(params, ids, tr, &format!("{prefix}_wz"), mode),
                    uz: bind(params, ids, tr, &format!("{prefix}_uz"), mode),
                    bz: bind(params, ids, tr, &format!("{prefix}_bz"), mode),
                    wh: bind(params, ids, tr, &format!("{prefix}_wh"), mode),
                    uh: bind(params, ids, tr, &format!("{prefix}_uh"), mode),
                    bh: bind(params, ids, tr, &format!("{prefix}_bh"), mode),
                };
                let swept = if spec.arch == Arch::ConvGru {
                    let g = cell(tr, "gru");
                    gru_sweep(&mut tr.tape, &g, cur, hid, false)?
                } else {
                    let gf = cell(tr, "gru_fwd");
                    let gb = cell(tr, "gru_bwd");
                    let a = gru_sweep(&mut tr.tape, &gf, cur, hid, false)?;
                    let b = gru_sweep(&mut tr.tape, &gb, cur, hid, true)?;
                    tr.tape.concat_channels(&[a, b])?
                };
                tr.tape.global_avg_pool(swept)
            }
            Arch::Resnet => {
                let widths = spec.resnet_widths();
                let mut bn_i = 0;
                let mut batch_norm = |tr: &mut Trace, x: Var, prefix: &str| -> Result<Var> {
                    let g = bind(params, ids, tr, &format!("{prefix}_g"), mode);
                    let b = bind(params, ids, tr, &format!("{prefix}_b"), mode);
                    let out = tr.tape.batch_norm(x, g, b, &mut running[bn_i], train)?;
                    bn_i += 1;
                    Ok(out)
                };
                let w = bind(params, ids, tr, "stem_w", mode);
                let z = tr.tape.conv2d(xin, w, 1, 1)?;
                let z = batch_norm(tr, z, "stem_bn")?;
                let mut cur = tr.tape.relu(z);
                let mut c_in = widths[0];
                for (s, &c_out) in widths.iter().enumerate() {
                    for blk in 0..2 {
                        let p = format!("s{}b{}", s + 1, blk + 1);
                        let stride = if s > 0 && blk == 0 { 2 } else { 1 };
                        let w1 = bind(params, ids, tr, &format!("{p}_conv1_w"), mode);
                        let z = tr.tape.conv2d(cur, w1, stride, 1)?;
                        let z = batch_norm(tr, z, &format!("{p}_bn1"))?;
                        let z = tr.tape.relu(z);
                        let w2 = bind(params, ids, tr, &format!("{p}_conv2_w"), mode);
                        let z = tr.tape.conv2d(z, w2, 1, 1)?;
                        let z = batch_norm(tr, z, &format!("{p}_bn2"))?;
                        let skip = if stride != 1 || c_in != c_out {
                            let wd = bind(params, ids, tr, &format!("{p}_down_w"), mode);
                            let d = tr.tape.conv2d(cur, wd, stride, 0)?;
                            batch_norm(tr, d, &format!("{p}_down_bn"))?
                        } else {
                            cur
                        };
                        let sum = tr.tape.add(z, skip)?;
                        cur = tr.tape.relu(sum);
                        c_in = c_out;
                    }
                }
                tr.tape.global_avg_pool(cur)
            }
        }
    }

    /// Logits of one Task-IL head (1-based `task_id`).
    pub fn task_head(&self, tr: &mut Trace, feat: Var, task_id: usize, mode: Mode) -> Result<Var> {
        if self.spec.il_mode != IlMode::TaskIl {
            return Err(Error::Usage("task_head is only valid under Task-IL".into()));
        }
        if task_id < 1 || task_id > self.spec.n_tasks {
            return Err(Error::Usage(format!(
                "task_id {task_id} outside 1..={}",
                self.spec.n_tasks
            )));
        }
        let w = bind(&self.params, &self.ids, tr, &format!("head{task_id}_w"), mode);
        let b = bind(&self.params, &self.ids, tr, &format!("head{task_id}_b"), mode);
        let z = tr.tape.matmul(feat, w)?;
        tr.tape.add_row_bias(z, b)
    }

    /// Full logits of the shared Class-IL head (unmasked).
    pub fn shared_head(&self, tr: &mut Trace, feat: Var, mode: Mode) -> Result<Var> {
        if self.spec.il_mode != IlMode::ClassIl {
            return Err(Error::Usage("shared_head is only valid under Class-IL".into()));
        }
        let w = bind(&self.params, &self.ids, tr, "head_w", mode);
        let b = bind(&self.params, &self.ids, tr, "head_b", mode);
        let z = tr.tape.matmul(feat, w)?;
        tr.tape.add_row_bias(z, b)
    }

    /// Class-participation mask over the shared head for `seen` classes.
    pub fn class_mask(&self, seen: &[usize]) -> Result<Vec<bool>> {
        if seen.is_empty() {
            return Err(Error::Usage("Class-IL routing needs a nonempty seen set".into()));
        }
        let mut mask = vec![false; self.spec.total_classes];
        for &c in seen {
            if c >= self.spec.total_classes {
                return Err(Error::Usage(format!(
                    "seen class {c} outside the {}-way head",
                    self.spec.total_classes
                )));
            }
            mask[c] = true;
        }
        Ok(mask)
    }

    /// Records a full forward pass with head routing.
    pub fn forward_pass(&mut self, x: &Tensor, routing: &Routing, mode: Mode) -> Result<ForwardPass> {
        let mut tr = Trace::new();
        let feat = self.features(&mut tr, x, mode)?;
        let (logits, mask) = match (routing, self.spec.il_mode) {
            (Routing::TaskIl { task_id }, IlMode::TaskIl) => {
                (self.task_head(&mut tr, feat, *task_id, mode)?, None)
            }
            (Routing::ClassIl { seen }, IlMode::ClassIl) => {
                let mask = self.class_mask(seen)?;
                (self.shared_head(&mut tr, feat, mode)?, Some(mask))
            }
            _ => {
                return Err(Error::Usage(format!(
                    "routing does not match the model's {:?} mode",
                    self.spec.il_mode
                )))
            }
        };
        Ok(ForwardPass {
            trace: tr,
            penultimate: feat,
            logits,
            mask,
        })
    }

    /// Evaluation logits. Class-IL masks unseen classes to −∞ so they can
    /// never be the argmax and the softmax is restricted to seen classes.
    pub fn forward(&mut self, x: &Tensor, routing: &Routing) -> Result<Tensor> {
        let fp = self.forward_pass(x, routing, Mode::Eval)?;
        let mut logits = fp.trace.tape.value(fp.logits).clone();
        if let Some(mask) = &fp.mask {
            let c = logits.dim(1);
            for (i, v) in logits.data.iter_mut().enumerate() {
                if !mask[i % c] {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        Ok(logits)
    }

    /// The head's input on a probe batch: eval mode, no gradient
    /// recording.
    pub fn penultimate_activations(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut tr = Trace::new();
        let feat = self.features(&mut tr, x, Mode::Eval)?;
        Ok(tr.tape.value(feat).clone())
    }

    /// Weight-eRank layer groups. Every weight matrix/kernel of the
    /// feature path appears in exactly one group; biases and
    /// normalization scales are excluded.
    pub fn layer_groups(&self) -> LayerGroupMap {
        let mut map = LayerGroupMap::new();
        let heads: Vec<String> = self
            .spec
            .head_names()
            .into_iter()
            .map(|(name, _)| format!("{name}_w"))
            .collect();
        let gates = |prefix: &str| -> Vec<String> {
            ["wr", "ur", "wz", "uz", "wh", "uh"]
                .iter()
                .map(|g| format!("{prefix}_{g}"))
                .collect()
        };
        match self.spec.arch {
            Arch::Mlp => {
                map.insert(Group::Early, vec!["fc1_w".into()]);
                map.insert(Group::Middle, vec!["fc2_w".into()]);
            }
            Arch::ConvGru => {
                let convs = (1..=self.spec.conv_channels.len())
                    .map(|i| format!("conv{i}_w"))
                    .collect();
                map.insert(Group::Early, convs);
                map.insert(Group::Middle, gates("gru"));
            }
            Arch::BiConvGru => {
                map.insert(Group::Early, vec!["conv1_w".into()]);
                let mid = (2..=self.spec.conv_channels.len())
                    .map(|i| format!("conv{i}_w"))
                    .collect();
                map.insert(Group::Middle, mid);
                let mut late = gates("gru_fwd");
                late.extend(gates("gru_bwd"));
                map.insert(Group::Late, late);
            }
            Arch::Resnet => {
                // the stem is grouped with stage 1
                let stage = |s: usize| -> Vec<String> {
                    let mut v = Vec::new();
                    for blk in 1..=2 {
                        let p = format!("s{s}b{blk}");
                        for suffix in ["conv1_w", "conv2_w", "down_w"] {
                            let name = format!("{p}_{suffix}");
                            if self.ids.contains_key(&name) {
                                v.push(name);
                            }
                        }
                    }
                    v
                };
                let mut early = vec!["stem_w".to_string()];
                early.extend(stage(1));
                map.insert(Group::Early, early);
                let mut mid = stage(2);
                mid.extend(stage(3));
                map.insert(Group::Middle, mid);
                map.insert(Group::Late, stage(4));
            }
        }
        map.insert(Group::Head, heads);
        map
    }

    /// A parameter's value as a 2-D matrix: conv kernels are matricized
    /// to [O, C·kH·kW], matrices pass through.
    pub fn matricized(&self, name: &str) -> Result<Tensor> {
        let p = self
            .params
            .by_name(name)
            .ok_or_else(|| Error::Usage(format!("no parameter named {name}")))?;
        match p.value.rank() {
            2 => Ok(p.value.clone()),
            4 => matricize_conv_kernel(&p.value),
            r => Err(Error::Usage(format!("{name} has rank {r}, expected 2 or 4"))),
        }
    }

    // -----------------------------------------------------------------
    // checkpoints

    /// Writes a self-describing binary checkpoint: spec, parameters
    /// (values and momentum), and batch-norm running statistics.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let spec = serde_json::to_vec(&self.spec)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        write_bytes(&mut out, &spec);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            write_bytes(&mut out, p.name.as_bytes());
            write_tensor(&mut out, &p.value);
            write_tensor(&mut out, &p.velocity);
        }
        out.extend_from_slice(&(self.running.len() as u32).to_le_bytes());
        for r in &self.running {
            write_f64s(&mut out, &r.mean);
            write_f64s(&mut out, &r.var);
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Cursor { bytes: &bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let spec_bytes = r.bytes_field()?;
        let spec: ModelSpec = serde_json::from_slice(spec_bytes).map_err(|e| Error::Parse {
            offset: 12,
            message: format!("bad spec json: {e}"),
        })?;
        let n_params = r.u32()? as usize;
        let mut params = ParamSet::new();
        let mut ids = BTreeMap::new();
        for _ in 0..n_params {
            let name = String::from_utf8(r.bytes_field()?.to_vec()).map_err(|e| Error::Parse {
                offset: r.pos,
                message: format!("bad parameter name: {e}"),
            })?;
            let value = r.tensor()?;
            let velocity = r.tensor()?;
            let mut p = Parameter::new(name.clone(), value);
            p.velocity = velocity;
            let id = params.add(p);
            ids.insert(name, id);
        }
        let n_running = r.u32()? as usize;
        let mut running = Vec::with_capacity(n_running);
        for _ in 0..n_running {
            let mean = r.f64s()?;
            let var = r.f64s()?;
            let mut rs = RunningStats::new(mean.len());
            rs.mean = mean;
            rs.var = var;
            running.push(rs);
        }
        Ok(Model {
            spec,
            params,
            ids,
            running,
        })
    }
}

fn write_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn write_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in &t.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    write_f64s(out, &t.data);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("truncated checkpoint: need {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        let b = self.take(n * 8)?;
        Ok(b.chunks(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let data = self.f64s()?;
        Tensor::new(shape, data).map_err(|e| Error::Parse {
            offset: self.pos,
            message: format!("bad tensor: {e}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Trace;

    fn ones_cell(in_ch: usize, hid: usize, bz: f64) -> GruCellWeights {
        GruCellWeights {
            wr: Tensor::full(&[hid, in_ch, 3, 3], 1.0),
            ur: Tensor::full(&[hid, hid, 3, 3], 1.0),
            br: Tensor::zeros(&[hid]),
            wz: Tensor::full(&[hid, in_ch, 3, 3], 1.0),
            uz: Tensor::full(&[hid, hid, 3, 3], 1.0),
            bz: Tensor::full(&[hid], bz),
            wh: Tensor::full(&[hid, in_ch, 3, 3], 1.0),
            uh: Tensor::full(&[hid, hid, 3, 3], 1.0),
            bh: Tensor::zeros(&[hid]),
        }
    }

    #[test]
    fn cell_scalar_reference_value() {
        // 1x1 spatial, 1 channel, all weights 1, x=1, h=0:
        // r = z = sigmoid(1), htilde = tanh(1), h' = sigmoid(1)*tanh(1)
        let w = ones_cell(1, 1, 0.0);
        let x = Tensor::full(&[1, 1, 1, 1], 1.0);
        let h = Tensor::zeros(&[1, 1, 1, 1]);
        let out = convgru_cell_step(&x, &h, &w).unwrap();
        let sig = 1.0 / (1.0 + (-1.0f64).exp());
        let expect = sig * 1.0f64.tanh();
        assert!((out.item() - expect).abs() < 1e-12, "{} vs {expect}", out.item());
        assert!((out.item() - 0.5568).abs() < 1e-4);
    }

    #[test]
    fn cell_saturated_update_gate_keeps_old_state() {
        // b_z = -1000 forces z -> 0, so h' = h_prev elementwise
        let w = ones_cell(1, 2, -1000.0);
        let x = Tensor::full(&[1, 1, 2, 3], 0.3);
        let h = Tensor {
            shape: vec![1, 2, 2, 3],
            data: (0..12).map(|i| (i as f64) / 13.0 - 0.4).collect(),
        };
        let out = convgru_cell_step(&x, &h, &w).unwrap();
        for (a, b) in out.data.iter().zip(&h.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cell_zero_state_ignores_reset_gate() {
        // h_prev = 0 makes the U_h(r . h) term vanish, so the output must
        // not depend on the reset-gate weights.
        let x = Tensor {
            shape: vec![1, 1, 2, 2],
            data: vec![0.1, -0.2, 0.3, 0.4],
        };
        let h = Tensor::zeros(&[1, 1, 2, 2]);
        let mut a = ones_cell(1, 1, 0.0);
        let out1 = convgru_cell_step(&x, &h, &a).unwrap();
        a.wr = Tensor::full(&[1, 1, 3, 3], -5.0);
        a.br = Tensor::full(&[1], 3.0);
        let out2 = convgru_cell_step(&x, &h, &a).unwrap();
        assert_eq!(out1.data, out2.data);
    }

    #[test]
    fn cell_rejects_spatial_mismatch() {
        let w = ones_cell(1, 1, 0.0);
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let h = Tensor::zeros(&[1, 1, 3, 2]);
        assert!(matches!(
            convgru_cell_step(&x, &h, &w),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn hidden_state_stays_in_unit_interval_from_zero_init() {
        // h_t is a convex combination of h_{t-1} and a tanh output, so
        // from h_0 = 0 every element stays in [-1, 1].
        let w = ones_cell(2, 3, 0.0);
        let mut h = Tensor::zeros(&[1, 3, 4, 4]);
        for step in 0..6 {
            let x = Tensor {
                shape: vec![1, 2, 4, 4],
                data: (0..32).map(|i| ((i + step * 7) as f64 * 1.37).sin() * 3.0).collect(),
            };
            h = convgru_cell_step(&x, &h, &w).unwrap();
            assert!(h.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn bidirectional_doubles_channels_and_is_symmetric() {
        let hid = 2;
        let w = ones_cell(1, hid, 0.0);
        // vertically symmetric input with identical fwd/bwd cells:
        // flipping rows swaps the channel halves
        let rows = [0.1, 0.7, 0.7, 0.1];
        let mut data = Vec::new();
        for r in rows {
            data.extend(std::iter::repeat(r).take(3));
        }
        let feats = Tensor {
            shape: vec![1, 1, 4, 3],
            data,
        };
        let out = bidirectional_sweep(&feats, &w, &w).unwrap();
        assert_eq!(out.shape, vec![1, 2 * hid, 4, 3]);
        let idx = |c: usize, h: usize, x: usize| out.idx4(0, c, h, x);
        for c in 0..hid {
            for h in 0..4 {
                for x in 0..3 {
                    let a = out.data[idx(c, h, x)];
                    let b = out.data[idx(c + hid, 3 - h, x)];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bidirectional_single_row_halves_agree() {
        let w = ones_cell(1, 2, 0.0);
        let feats = Tensor {
            shape: vec![1, 1, 1, 3],
            data: vec![0.2, -0.1, 0.5],
        };
        let out = bidirectional_sweep(&feats, &w, &w).unwrap();
        assert_eq!(out.shape, vec![1, 4, 1, 3]);
        assert_eq!(out.data[..6], out.data[6..]);
    }

    #[test]
    fn build_is_deterministic_and_task_il_heads_sized() {
        let spec = ModelSpec::mnist_mlp();
        let a = build_model(&spec, 7).unwrap();
        let b = build_model(&spec, 7).unwrap();
        for (p, q) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(p.value.data, q.value.data, "{}", p.name);
        }
        // 5 heads of 2 outputs
        for t in 1..=5 {
            assert_eq!(a.params.by_name(&format!("head{t}_w")).unwrap().value.shape, vec![64, 2]);
        }
        assert!(a.params.by_name("head6_w").is_none());
        let c = build_model(&spec, 8).unwrap();
        assert_ne!(a.params.by_name("fc1_w").unwrap().value.data, c.params.by_name("fc1_w").unwrap().value.data);
    }

    #[test]
    fn golden_parameter_counts() {
        let mlp = build_model(&ModelSpec::mnist_mlp(), 0).unwrap();
        // fc1 784*256+256, fc2 256*256+256, 5 heads of 256*2+2
        assert_eq!(mlp.params.numel(), 784 * 64 + 64 + 64 * 64 + 64 + 5 * (64 * 2 + 2));

        let gru = build_model(&ModelSpec::mnist_convgru(), 0).unwrap();
        let convs = 16 * 9 + 16 + 32 * 16 * 9 + 32 + 32 * 32 * 9 + 32 + 64 * 32 * 9 + 64;
        let gates = 6 * (64 * 64 * 9) + 3 * 64;
        assert_eq!(gru.params.numel(), convs + gates + 5 * (64 * 2 + 2));

        let bi = build_model(&ModelSpec::cifar_bi_convgru(10, 50), 0).unwrap();
        let bi_convs = 16 * 3 * 9 + 16 + 32 * 16 * 9 + 32 + 32 * 32 * 9 + 32 + 64 * 32 * 9 + 64;
        assert_eq!(bi.params.numel(), bi_convs + 2 * gates + 128 * 50 + 50);
    }

    #[test]
    fn resnet_width_scaling() {
        let full = ModelSpec::cifar_resnet(1.0, 10, 50);
        assert_eq!(full.resnet_widths(), [64, 128, 256, 512]);
        let quarter = ModelSpec::cifar_resnet(0.25, 10, 50);
        assert_eq!(quarter.resnet_widths(), [16, 32, 64, 128]);
        let m = build_model(&quarter, 0).unwrap();
        assert_eq!(m.params.by_name("stem_w").unwrap().value.shape, vec![16, 3, 3, 3]);
        assert_eq!(m.params.by_name("s2b1_down_w").unwrap().value.shape, vec![32, 16, 1, 1]);
        assert!(m.params.by_name("s1b1_down_w").is_none());
        assert_eq!(m.params.by_name("head_w").unwrap().value.shape, vec![128, 50]);
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let mut s = ModelSpec::mnist_mlp();
        s.mlp_hidden = 0;
        assert!(matches!(build_model(&s, 0), Err(Error::Config(_))));
        let mut s = ModelSpec::cifar_resnet(0.25, 10, 50);
        s.classes_per_task = 2; // per-task heads under Class-IL
        assert!(matches!(build_model(&s, 0), Err(Error::Config(_))));
    }

    fn toy_batch(n: usize, spec: &ModelSpec, scale: f64) -> Tensor {
        let numel = n * spec.in_channels * spec.in_height * spec.in_width;
        Tensor {
            shape: vec![n, spec.in_channels, spec.in_height, spec.in_width],
            data: (0..numel).map(|i| ((i as f64) * 0.73).sin() * scale).collect(),
        }
    }

    #[test]
    fn mlp_forward_shapes_and_penultimate() {
        let spec = ModelSpec::mnist_mlp();
        let mut m = build_model(&spec, 1).unwrap();
        let x = toy_batch(3, &spec, 1.0);
        let logits = m.forward(&x, &Routing::TaskIl { task_id: 3 }).unwrap();
        assert_eq!(logits.shape, vec![3, 2]);
        let acts = m.penultimate_activations(&x).unwrap();
        assert_eq!(acts.shape, vec![3, 64]);
        assert!(acts.data.iter().all(|&v| v >= 0.0), "ReLU output");
    }

    #[test]
    fn penultimate_matches_head_input_hook() {
        // duplicate-pass oracle: the logits recomputed from the captured
        // penultimate activations equal the model's own logits
        let spec = ModelSpec::mnist_mlp();
        let mut m = build_model(&spec, 2).unwrap();
        let x = toy_batch(2, &spec, 1.0);
        let acts = m.penultimate_activations(&x).unwrap();
        let logits = m.forward(&x, &Routing::TaskIl { task_id: 1 }).unwrap();
        let w = &m.params.by_name("head1_w").unwrap().value;
        let b = &m.params.by_name("head1_b").unwrap().value;
        for i in 0..2 {
            for j in 0..2 {
                let mut z = b.data[j];
                for k in 0..64 {
                    z += acts.data[i * 64 + k] * w.data[k * 2 + j];
                }
                assert!((z - logits.data[i * 2 + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn routing_errors() {
        let spec = ModelSpec::mnist_mlp();
        let mut m = build_model(&spec, 0).unwrap();
        let x = toy_batch(1, &spec, 1.0);
        assert!(matches!(
            m.forward(&x, &Routing::ClassIl { seen: &[0] }),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            m.forward(&x, &Routing::TaskIl { task_id: 6 }),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            m.forward(&toy_batch(1, &ModelSpec::cifar_resnet(1.0, 10, 50), 1.0), &Routing::TaskIl { task_id: 1 }),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn class_il_masking_blocks_unseen_argmax() {
        let spec = ModelSpec::cifar_resnet(0.125, 10, 10);
        let mut m = build_model(&spec, 3).unwrap();
        let x = toy_batch(2, &spec, 0.5);
        let seen = [0usize, 1, 2, 3, 4];
        let logits = m.forward(&x, &Routing::ClassIl { seen: &seen }).unwrap();
        assert_eq!(logits.shape, vec![2, 10]);
        for row in logits.data.chunks(10) {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert!(seen.contains(&argmax));
            assert!(row[5..].iter().all(|&v| v == f64::NEG_INFINITY));
        }
    }

    #[test]
    fn task_il_head_isolation() {
        // gradients from task 1's loss must be zero on every other head
        let spec = ModelSpec::mnist_mlp();
        let mut m = build_model(&spec, 5).unwrap();
        let x = toy_batch(4, &spec, 1.0);
        let fp = m.forward_pass(&x, &Routing::TaskIl { task_id: 1 }, Mode::Train).unwrap();
        let mut tr = fp.trace;
        let loss = tr.tape.cross_entropy_loss(fp.logits, &[0, 1, 0, 1], None).unwrap();
        tr.backward_into(&mut m.params, loss).unwrap();
        assert!(m.params.by_name("head1_w").unwrap().grad.is_some());
        for t in 2..=5 {
            assert!(m.params.by_name(&format!("head{t}_w")).unwrap().grad.is_none());
        }
        assert!(m.params.by_name("fc1_w").unwrap().grad.is_some());
    }

    #[test]
    fn class_il_loss_invariant_to_masked_logits() {
        let spec = ModelSpec::cifar_resnet(0.125, 10, 10);
        let mut m = build_model(&spec, 3).unwrap();
        let x = toy_batch(2, &spec, 0.5);
        let labels = [1usize, 3];
        let seen = [0usize, 1, 2, 3, 4];
        let loss_of = |m: &mut Model| -> f64 {
            let fp = m.forward_pass(&x, &Routing::ClassIl { seen: &seen }, Mode::Eval).unwrap();
            let mut tr = fp.trace;
            let mask = fp.mask.unwrap();
            let loss = tr.tape.cross_entropy_loss(fp.logits, &labels, Some(&mask)).unwrap();
            tr.tape.value(loss).item()
        };
        let before = loss_of(&mut m);
        // perturb the head columns of unseen classes
        for name in ["head_w", "head_b"] {
            let p = m
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .unwrap();
            let cols = p.value.shape[p.value.rank() - 1];
            for (i, v) in p.value.data.iter_mut().enumerate() {
                if i % cols >= 5 {
                    *v += 17.0;
                }
            }
        }
        let after = loss_of(&mut m);
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn convgru_model_forward_and_groups() {
        let mut spec = ModelSpec::mnist_convgru();
        spec.conv_channels = vec![4, 8];
        spec.gru_hidden = 6;
        spec.in_height = 8;
        spec.in_width = 8;
        let mut m = build_model(&spec, 1).unwrap();
        let x = toy_batch(2, &spec, 0.5);
        let logits = m.forward(&x, &Routing::TaskIl { task_id: 2 }).unwrap();
        assert_eq!(logits.shape, vec![2, 2]);
        assert_eq!(m.penultimate_activations(&x).unwrap().shape, vec![2, 6]);

        let groups = m.layer_groups();
        assert_eq!(groups[&Group::Early], vec!["conv1_w", "conv2_w"]);
        assert_eq!(groups[&Group::Middle].len(), 6);
        assert!(!groups.contains_key(&Group::Late));
        assert_eq!(groups[&Group::Head].len(), 5);
    }

    #[test]
    fn bi_convgru_model_forward_and_groups() {
        let mut spec = ModelSpec::cifar_bi_convgru(10, 10);
        spec.conv_channels = vec![4, 4, 4, 4];
        spec.gru_hidden = 3;
        spec.in_height = 6;
        spec.in_width = 6;
        let mut m = build_model(&spec, 1).unwrap();
        let x = toy_batch(2, &spec, 0.5);
        let logits = m.forward(&x, &Routing::ClassIl { seen: &[0, 1] }).unwrap();
        assert_eq!(logits.shape, vec![2, 10]);
        assert_eq!(m.penultimate_activations(&x).unwrap().shape, vec![2, 6]);

        let groups = m.layer_groups();
        assert_eq!(groups[&Group::Early], vec!["conv1_w"]);
        assert_eq!(groups[&Group::Middle], vec!["conv2_w", "conv3_w", "conv4_w"]);
        assert_eq!(groups[&Group::Late].len(), 12, "two cells, 6 gate kernels each");
        assert_eq!(groups[&Group::Head], vec!["head_w"]);
    }

    #[test]
    fn mlp_and_resnet_groups_partition_weight_matrices() {
        for spec in [ModelSpec::mnist_mlp(), ModelSpec::cifar_resnet(0.125, 10, 10)] {
            let m = build_model(&spec, 0).unwrap();
            let groups = m.layer_groups();
            if spec.arch == Arch::Mlp {
                assert!(!groups.contains_key(&Group::Late));
            }
            let mut grouped: Vec<&String> = groups.values().flatten().collect();
            grouped.sort();
            let before = grouped.len();
            grouped.dedup();
            assert_eq!(grouped.len(), before, "no matrix in two groups");
            // every >=2-D weight appears in exactly one group
            let expected: Vec<&str> = m
                .params
                .iter()
                .filter(|p| p.value.rank() >= 2)
                .map(|p| p.name.as_str())
                .collect();
            assert_eq!(grouped.len(), expected.len());
            for name in expected {
                assert!(grouped.iter().any(|g| g.as_str() == name), "{name} missing");
            }
            // matricization produces 2-D tensors for every grouped weight
            for name in groups.values().flatten() {
                assert_eq!(m.matricized(name).unwrap().rank(), 2);
            }
        }
    }

    #[test]
    fn resnet_forward_shapes_and_bn_modes_differ() {
        let spec = ModelSpec::cifar_resnet(0.125, 10, 10);
        let mut m = build_model(&spec, 4).unwrap();
        let x = toy_batch(2, &spec, 0.7);
        let seen = [0usize, 1];
        // train-mode pass updates running stats
        let before = m.running[0].mean.clone();
        let fp = m.forward_pass(&x, &Routing::ClassIl { seen: &seen }, Mode::Train).unwrap();
        assert_eq!(fp.trace.tape.value(fp.logits).shape, vec![2, 10]);
        assert_ne!(m.running[0].mean, before);
        // eval pass leaves them unchanged
        let snap = m.running[0].mean.clone();
        let _ = m.forward(&x, &Routing::ClassIl { seen: &seen }).unwrap();
        assert_eq!(m.running[0].mean, snap);
        assert_eq!(m.penultimate_activations(&x).unwrap().shape, vec![2, 64]);
    }

    #[test]
    fn eval_mode_records_no_parameter_gradients() {
        let spec = ModelSpec::mnist_mlp();
        let mut m = build_model(&spec, 1).unwrap();
        let x = toy_batch(2, &spec, 1.0);
        let fp = m.forward_pass(&x, &Routing::TaskIl { task_id: 1 }, Mode::Eval).unwrap();
        let mut tr = fp.trace;
        let loss = tr.tape.cross_entropy_loss(fp.logits, &[0, 1], None).unwrap();
        tr.backward_into(&mut m.params, loss).unwrap();
        assert!(m.params.iter().all(|p| p.grad.is_none()));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = ModelSpec::cifar_resnet(0.125, 10, 10);
        let mut m = build_model(&spec, 9).unwrap();
        let x = toy_batch(2, &spec, 0.5);
        // dirty the running stats and velocities so the roundtrip is
        // non-trivial
        let _ = m.forward_pass(&x, &Routing::ClassIl { seen: &[0, 1] }, Mode::Train).unwrap();
        m.params.iter_mut().next().unwrap().velocity.data[0] = 0.25;
        m.save_checkpoint(&path).unwrap();
        let loaded = Model::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.spec, m.spec);
        assert_eq!(loaded.params.len(), m.params.len());
        for (p, q) in m.params.iter().zip(loaded.params.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value.shape, q.value.shape);
            assert_eq!(p.value.data, q.value.data);
            assert_eq!(p.velocity.data, q.velocity.data);
        }
        assert_eq!(loaded.running, m.running);
        // identical outputs after reload
        let mut m2 = loaded;
        let a = m.forward(&x, &Routing::ClassIl { seen: &[0, 1] }).unwrap();
        let b = m2.forward(&x, &Routing::ClassIl { seen: &[0, 1] }).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            Model::load_checkpoint(&path),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn gru_weight_reuse_accumulates_one_binding() {
        // the same gate kernel is used every timestep; the trace must
        // bind it once so the gradient sums across timesteps
        let mut spec = ModelSpec::mnist_convgru();
        spec.conv_channels = vec![2];
        spec.gru_hidden = 2;
        spec.in_height = 4;
        spec.in_width = 4;
        let mut m = build_model(&spec, 1).unwrap();
        let x = toy_batch(1, &spec, 0.5);
        let mut tr = Trace::new();
        let feat = m.features(&mut tr, &x, Mode::Train).unwrap();
        let logits = m.task_head(&mut tr, feat, 1, Mode::Train).unwrap();
        let loss = tr.tape.cross_entropy_loss(logits, &[0], None).unwrap();
        tr.backward_into(&mut m.params, loss).unwrap();
        let g = m.params.by_name("gru_uz").unwrap().grad.as_ref().unwrap();
        assert!(g.data.iter().any(|&v| v != 0.0));
    }
}

#[cfg(test)]
mod bench {
    use super::*;
    use crate::nn::{sgd_momentum_step, OptimizerConfig};

    #[test]
    #[ignore]
    fn bench_resnet_quarter_step() {
        let spec = ModelSpec::cifar_resnet(0.25, 10, 50);
        let mut m = build_model(&spec, 0).unwrap();
        let n = 32;
        let x = Tensor {
            shape: vec![n, 3, 32, 32],
            data: (0..n * 3 * 1024).map(|i| ((i as f64) * 0.01).sin()).collect(),
        };
        let labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
        let seen: Vec<usize> = (0..5).collect();
        let opt = OptimizerConfig::default();
        let t0 = std::time::Instant::now();
        let reps = 3;
        for _ in 0..reps {
            let fp = m.forward_pass(&x, &Routing::ClassIl { seen: &seen }, Mode::Train).unwrap();
            let mut tr = fp.trace;
            let mask = fp.mask.unwrap();
            let loss = tr.tape.cross_entropy_loss(fp.logits, &labels, Some(&mask)).unwrap();
            tr.backward_into(&mut m.params, loss).unwrap();
            sgd_momentum_step(&mut m.params, &opt);
        }
        eprintln!("train step batch32: {:?}/step", t0.elapsed() / reps);
        let t1 = std::time::Instant::now();
        let _ = m.penultimate_activations(&x).unwrap();
        eprintln!("eval batch32 forward: {:?}", t1.elapsed());
    }
}
