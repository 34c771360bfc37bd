//! The three forecasting networks as single-frame step functions over
//! persistent recurrent state.
//!
//! All three are fully convolutional, so one parameter set works at any grid
//! size; only the transposed-conv output paddings depend on the grid and are
//! derived at build time. The full maps are 72x72; reduced grids (12x12)
//! keep the same layer structure for cheap end-to-end gradient checks.

use std::str::FromStr;

use crate::cells::{CellState, ConvLSTMCell};
use crate::tensor::{ConvSpec, Element, ParamRng, Tensor, TensorError, TensorResult};

/// Map grid the networks are built for by default.
pub const FULL_GRID: usize = 72;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    /// Encoder, one recurrent unit at the bottleneck, decoder.
    EncDec,
    /// Recurrent U-shaped network with skip concatenations; five recurrent
    /// units across three scales.
    RUnet,
    /// Three dilated recurrent units (dilation 1-2-1) at full resolution.
    Dcnn121,
}

impl ArchKind {
    pub const ALL: [ArchKind; 3] = [ArchKind::EncDec, ArchKind::RUnet, ArchKind::Dcnn121];

    pub fn name(&self) -> &'static str {
        match self {
            ArchKind::EncDec => "encdec",
            ArchKind::RUnet => "runet",
            ArchKind::Dcnn121 => "dcnn121",
        }
    }

    pub(crate) fn tag(&self) -> u8 {
        match self {
            ArchKind::EncDec => 0,
            ArchKind::RUnet => 1,
            ArchKind::Dcnn121 => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<ArchKind> {
        Some(match tag {
            0 => ArchKind::EncDec,
            1 => ArchKind::RUnet,
            2 => ArchKind::Dcnn121,
            _ => return None,
        })
    }
}

impl FromStr for ArchKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "encdec" | "enc-dec" => Ok(ArchKind::EncDec),
            "runet" | "r-unet" => Ok(ArchKind::RUnet),
            "dcnn121" | "dcnn" => Ok(ArchKind::Dcnn121),
            other => Err(format!(
                "unknown architecture '{other}' (expected encdec, runet or dcnn121)"
            )),
        }
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Conv2dLayer<E: Element> {
    weight: Tensor<E>,
    bias: Tensor<E>,
    spec: ConvSpec,
}

impl<E: Element> Conv2dLayer<E> {
    fn new(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut ParamRng) -> Self {
        let spec = ConvSpec::square(kernel, stride, (kernel - 1) / 2);
        let fan_in = cin * kernel * kernel;
        let fan_out = cout * kernel * kernel;
        Conv2dLayer {
            weight: Tensor::param(
                &[cout, cin, kernel, kernel],
                rng.glorot_uniform(cout * cin * kernel * kernel, fan_in, fan_out),
            )
            .expect("conv weight"),
            bias: Tensor::param(&[cout], vec![E::zero(); cout]).expect("conv bias"),
            spec,
        }
    }

    /// Zeroed weights; used for output heads so a fresh model starts as
    /// the identity of its prediction scheme (zero map / zero correction).
    fn zeroed(self) -> Self {
        self.weight.data_mut().fill(E::zero());
        self
    }

    fn forward(&self, x: &Tensor<E>) -> TensorResult<Tensor<E>> {
        x.conv2d(&self.weight, &self.bias, &self.spec)
    }
}

#[derive(Debug, Clone)]
struct ConvT2dLayer<E: Element> {
    weight: Tensor<E>,
    bias: Tensor<E>,
    spec: ConvSpec,
}

impl<E: Element> ConvT2dLayer<E> {
    fn new(cin: usize, cout: usize, kernel: usize, stride: usize, output_padding: usize, rng: &mut ParamRng) -> Self {
        let spec = ConvSpec::square(kernel, stride, (kernel - 1) / 2).with_output_padding(output_padding);
        let fan_in = cin * kernel * kernel;
        let fan_out = cout * kernel * kernel;
        ConvT2dLayer {
            weight: Tensor::param(
                &[cin, cout, kernel, kernel],
                rng.glorot_uniform(cin * cout * kernel * kernel, fan_in, fan_out),
            )
            .expect("transpose conv weight"),
            bias: Tensor::param(&[cout], vec![E::zero(); cout]).expect("transpose conv bias"),
            spec,
        }
    }

    fn forward(&self, x: &Tensor<E>) -> TensorResult<Tensor<E>> {
        x.conv2d_transpose(&self.weight, &self.bias, &self.spec)
    }
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

const WIDTH: usize = 8;
const KERNEL: usize = 3;

#[derive(Debug, Clone)]
enum Net<E: Element> {
    EncDec {
        enc: Vec<Conv2dLayer<E>>,
        cell: ConvLSTMCell<E>,
        dec: Vec<ConvT2dLayer<E>>,
        head: Conv2dLayer<E>,
    },
    RUnet {
        stem: Conv2dLayer<E>,
        enc_cell0: ConvLSTMCell<E>,
        down0: Conv2dLayer<E>,
        enc_cell1: ConvLSTMCell<E>,
        down1: Conv2dLayer<E>,
        mid_cell: ConvLSTMCell<E>,
        up1: ConvT2dLayer<E>,
        mix1: Conv2dLayer<E>,
        dec_cell1: ConvLSTMCell<E>,
        up0: ConvT2dLayer<E>,
        mix0: Conv2dLayer<E>,
        dec_cell0: ConvLSTMCell<E>,
        head: Conv2dLayer<E>,
    },
    Dcnn121 {
        cells: Vec<ConvLSTMCell<E>>,
        head: Conv2dLayer<E>,
    },
}

/// Sizes along the stride-2 encoder: `[grid, grid/2, grid/4, grid/8]`
/// (conv arithmetic, so odd extents round the same way the layers do).
fn encoder_sizes(grid: usize, stages: usize) -> TensorResult<Vec<usize>> {
    let spec = ConvSpec::square(KERNEL, 2, (KERNEL - 1) / 2);
    let mut sizes = vec![grid];
    let mut cur = grid;
    for _ in 0..stages {
        let (next, _) = spec.out_hw(cur, cur)?;
        sizes.push(next);
        cur = next;
    }
    Ok(sizes)
}

/// Output padding that makes a stride-2 transposed conv land exactly on
/// `target` when upsampling from `from`.
fn upsample_output_padding(from: usize, target: usize) -> TensorResult<usize> {
    let spec = ConvSpec::square(KERNEL, 2, (KERNEL - 1) / 2);
    let (base, _) = spec.transpose_out_hw(from, from)?;
    if target < base || target - base > 1 {
        return Err(TensorError::InvalidConvSpec {
            reason: format!("cannot upsample {from} to {target} with stride 2"),
        });
    }
    Ok(target - base)
}

/// An architecture instance: ordered named parameters plus one state slot
/// descriptor per recurrent unit. Slot order follows execution order and is
/// stable across save/load.
#[derive(Debug, Clone)]
pub struct Model<E: Element = f32> {
    kind: ArchKind,
    grid: usize,
    net: Net<E>,
}

impl<E: Element> Model<E> {
    /// Build a full-resolution (72x72) network with seeded parameters.
    pub fn build(kind: ArchKind, seed: u64) -> Model<E> {
        Self::build_with_grid(kind, seed, FULL_GRID).expect("full grid is always valid")
    }

    /// Build for an arbitrary grid; reduced grids (e.g. 12) reuse the same
    /// layer structure for cheap gradient checks.
    pub fn build_with_grid(kind: ArchKind, seed: u64, grid: usize) -> TensorResult<Model<E>> {
        let mut rng = ParamRng::new(seed);
        let net = match kind {
            ArchKind::EncDec => {
                let sizes = encoder_sizes(grid, 3)?;
                let enc = vec![
                    Conv2dLayer::new(1, WIDTH, KERNEL, 2, &mut rng),
                    Conv2dLayer::new(WIDTH, WIDTH, KERNEL, 2, &mut rng),
                    Conv2dLayer::new(WIDTH, WIDTH, KERNEL, 2, &mut rng),
                    Conv2dLayer::new(WIDTH, 4, KERNEL, 1, &mut rng),
                ];
                let cell = ConvLSTMCell::new(4, 4, KERNEL, 1, &mut rng);
                let dec = vec![
                    ConvT2dLayer::new(4, WIDTH, KERNEL, 2, upsample_output_padding(sizes[3], sizes[2])?, &mut rng),
                    ConvT2dLayer::new(WIDTH, WIDTH, KERNEL, 2, upsample_output_padding(sizes[2], sizes[1])?, &mut rng),
                    ConvT2dLayer::new(WIDTH, WIDTH, KERNEL, 2, upsample_output_padding(sizes[1], sizes[0])?, &mut rng),
                ];
                let head = Conv2dLayer::new(WIDTH, 1, KERNEL, 1, &mut rng).zeroed();
                Net::EncDec {
                    enc,
                    cell,
                    dec,
                    head,
                }
            }
            ArchKind::RUnet => {
                let sizes = encoder_sizes(grid, 2)?;
                Net::RUnet {
                    stem: Conv2dLayer::new(1, WIDTH, KERNEL, 1, &mut rng),
                    enc_cell0: ConvLSTMCell::new(WIDTH, WIDTH, KERNEL, 1, &mut rng),
                    down0: Conv2dLayer::new(WIDTH, WIDTH, KERNEL, 2, &mut rng),
                    enc_cell1: ConvLSTMCell::new(WIDTH, WIDTH, KERNEL, 1, &mut rng),
                    down1: Conv2dLayer::new(WIDTH, WIDTH, KERNEL, 2, &mut rng),
                    mid_cell: ConvLSTMCell::new(WIDTH, WIDTH, KERNEL, 1, &mut rng),
                    up1: ConvT2dLayer::new(WIDTH, WIDTH, KERNEL, 2, upsample_output_padding(sizes[2], sizes[1])?, &mut rng),
                    mix1: Conv2dLayer::new(2 * WIDTH, WIDTH, KERNEL, 1, &mut rng),
                    dec_cell1: ConvLSTMCell::new(WIDTH, WIDTH, KERNEL, 1, &mut rng),
                    up0: ConvT2dLayer::new(WIDTH, WIDTH, KERNEL, 2, upsample_output_padding(sizes[1], sizes[0])?, &mut rng),
                    mix0: Conv2dLayer::new(2 * WIDTH, WIDTH, KERNEL, 1, &mut rng),
                    dec_cell0: ConvLSTMCell::new(WIDTH, WIDTH, KERNEL, 1, &mut rng),
                    head: Conv2dLayer::new(WIDTH, 1, KERNEL, 1, &mut rng).zeroed(),
                }
            }
            ArchKind::Dcnn121 => {
                let cells = vec![
                    ConvLSTMCell::new(1, WIDTH, KERNEL, 1, &mut rng),
                    ConvLSTMCell::new(WIDTH, WIDTH, KERNEL, 2, &mut rng),
                    ConvLSTMCell::new(WIDTH, WIDTH, KERNEL, 1, &mut rng),
                ];
                let head = Conv2dLayer::new(WIDTH, 1, KERNEL, 1, &mut rng).zeroed();
                Net::Dcnn121 { cells, head }
            }
        };
        Ok(Model { kind, grid, net })
    }

    pub fn kind(&self) -> ArchKind {
        self.kind
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    /// Number of recurrent state slots (1 for EncDec, 5 for RUnet, 3 for
    /// Dcnn121).
    pub fn state_slots(&self) -> usize {
        match &self.net {
            Net::EncDec { .. } => 1,
            Net::RUnet { .. } => 5,
            Net::Dcnn121 { .. } => 3,
        }
    }

    /// Zeroed recurrent states for a batch, in execution order.
    pub fn init_states(&self, batch: usize) -> Vec<CellState<E>> {
        let g = self.grid;
        match &self.net {
            Net::EncDec { cell, .. } => {
                let s = encoder_sizes(g, 3).expect("built grid");
                vec![cell.init_state(batch, s[3], s[3])]
            }
            Net::RUnet {
                enc_cell0,
                enc_cell1,
                mid_cell,
                dec_cell1,
                dec_cell0,
                ..
            } => {
                let s = encoder_sizes(g, 2).expect("built grid");
                vec![
                    enc_cell0.init_state(batch, s[0], s[0]),
                    enc_cell1.init_state(batch, s[1], s[1]),
                    mid_cell.init_state(batch, s[2], s[2]),
                    dec_cell1.init_state(batch, s[1], s[1]),
                    dec_cell0.init_state(batch, s[0], s[0]),
                ]
            }
            Net::Dcnn121 { cells, .. } => cells.iter().map(|c| c.init_state(batch, g, g)).collect(),
        }
    }

    /// One forward pass over a single frame `[B,1,grid,grid]`. Every
    /// recurrent slot advances exactly once; the output has the same shape
    /// as the input (a map under the direct scheme, a correction under the
    /// residual scheme).
    pub fn step(&self, frame: &Tensor<E>, states: &mut [CellState<E>]) -> TensorResult<Tensor<E>> {
        let s = frame.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.grid || s[3] != self.grid {
            return Err(TensorError::ShapeMismatch {
                left: s.to_vec(),
                right: vec![s.first().copied().unwrap_or(0), 1, self.grid, self.grid],
            });
        }
        debug_assert_eq!(states.len(), self.state_slots());
        match &self.net {
            Net::EncDec {
                enc,
                cell,
                dec,
                head,
            } => {
                let mut h = frame.clone();
                for layer in enc {
                    h = layer.forward(&h)?.tanh();
                }
                let (y, next) = cell.step(&h, &states[0])?;
                states[0] = next;
                let mut h = y;
                for layer in dec {
                    h = layer.forward(&h)?.tanh();
                }
                head.forward(&h)
            }
            Net::RUnet {
                stem,
                enc_cell0,
                down0,
                enc_cell1,
                down1,
                mid_cell,
                up1,
                mix1,
                dec_cell1,
                up0,
                mix0,
                dec_cell0,
                head,
            } => {
                let h0 = stem.forward(frame)?.tanh();
                let (skip0, next0) = enc_cell0.step(&h0, &states[0])?;
                states[0] = next0;
                let h1 = down0.forward(&skip0)?.tanh();
                let (skip1, next1) = enc_cell1.step(&h1, &states[1])?;
                states[1] = next1;
                let h2 = down1.forward(&skip1)?.tanh();
                let (mid, next2) = mid_cell.step(&h2, &states[2])?;
                states[2] = next2;

                let u1 = up1.forward(&mid)?.tanh();
                let m1 = mix1.forward(&u1.concat_channels(&skip1)?)?.tanh();
                let (d1, next3) = dec_cell1.step(&m1, &states[3])?;
                states[3] = next3;

                let u0 = up0.forward(&d1)?.tanh();
                let m0 = mix0.forward(&u0.concat_channels(&skip0)?)?.tanh();
                let (d0, next4) = dec_cell0.step(&m0, &states[4])?;
                states[4] = next4;

                head.forward(&d0)
            }
            Net::Dcnn121 { cells, head } => {
                let mut h = frame.clone();
                for (i, cell) in cells.iter().enumerate() {
                    let (y, next) = cell.step(&h, &states[i])?;
                    states[i] = next;
                    h = y;
                }
                head.forward(&h)
            }
        }
    }

    /// Ordered `(name, tensor)` pairs; names are unique and stable across
    /// save/load.
    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        let mut push = |name: &str, w: &Tensor<E>, b: &Tensor<E>| {
            out.push((format!("{name}.weight"), w.clone()));
            out.push((format!("{name}.bias"), b.clone()));
        };
        match &self.net {
            Net::EncDec {
                enc,
                cell,
                dec,
                head,
            } => {
                for (i, l) in enc.iter().enumerate() {
                    push(&format!("enc{i}"), &l.weight, &l.bias);
                }
                push("cell", cell.weight(), cell.bias());
                for (i, l) in dec.iter().enumerate() {
                    push(&format!("dec{i}"), &l.weight, &l.bias);
                }
                push("head", &head.weight, &head.bias);
            }
            Net::RUnet {
                stem,
                enc_cell0,
                down0,
                enc_cell1,
                down1,
                mid_cell,
                up1,
                mix1,
                dec_cell1,
                up0,
                mix0,
                dec_cell0,
                head,
            } => {
                push("stem", &stem.weight, &stem.bias);
                push("enc_cell0", enc_cell0.weight(), enc_cell0.bias());
                push("down0", &down0.weight, &down0.bias);
                push("enc_cell1", enc_cell1.weight(), enc_cell1.bias());
                push("down1", &down1.weight, &down1.bias);
                push("mid_cell", mid_cell.weight(), mid_cell.bias());
                push("up1", &up1.weight, &up1.bias);
                push("mix1", &mix1.weight, &mix1.bias);
                push("dec_cell1", dec_cell1.weight(), dec_cell1.bias());
                push("up0", &up0.weight, &up0.bias);
                push("mix0", &mix0.weight, &mix0.bias);
                push("dec_cell0", dec_cell0.weight(), dec_cell0.bias());
                push("head", &head.weight, &head.bias);
            }
            Net::Dcnn121 { cells, head } => {
                for (i, c) in cells.iter().enumerate() {
                    push(&format!("cell{i}"), c.weight(), c.bias());
                }
                push("head", &head.weight, &head.bias);
            }
        }
        out
    }

    /// Parameter tensors in named order.
    pub fn param_tensors(&self) -> Vec<Tensor<E>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Total number of scalar parameters.
    pub fn count_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for t in self.param_tensors() {
            t.zero_grad();
        }
    }

    /// Copy with untracked parameters: forward passes build no graph.
    pub fn eval_clone(&self) -> Model<E> {
        let mut m = self.clone();
        m.apply_params(|t| t.detached());
        m
    }

    /// Overwrite parameter values by name (e.g. from a checkpoint).
    pub fn load_named_params(&mut self, values: &[(String, Vec<usize>, Vec<E>)]) -> TensorResult<()> {
        let own = self.named_params();
        if own.len() != values.len() {
            return Err(TensorError::AxisMismatch {
                axis: "parameter count",
                left: own.len(),
                right: values.len(),
            });
        }
        for ((name, tensor), (got_name, got_shape, got_data)) in own.iter().zip(values.iter()) {
            if name != got_name {
                return Err(TensorError::InvalidConvSpec {
                    reason: format!("parameter order mismatch: expected {name}, found {got_name}"),
                });
            }
            if tensor.shape() != got_shape.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    left: tensor.shape().to_vec(),
                    right: got_shape.clone(),
                });
            }
            tensor.data_mut().copy_from_slice(got_data);
        }
        Ok(())
    }

    fn apply_params(&mut self, f: impl Fn(&Tensor<E>) -> Tensor<E>) {
        match &mut self.net {
            Net::EncDec {
                enc,
                cell,
                dec,
                head,
            } => {
                for l in enc.iter_mut() {
                    l.weight = f(&l.weight);
                    l.bias = f(&l.bias);
                }
                *cell = remap_cell(cell, &f);
                for l in dec.iter_mut() {
                    l.weight = f(&l.weight);
                    l.bias = f(&l.bias);
                }
                head.weight = f(&head.weight);
                head.bias = f(&head.bias);
            }
            Net::RUnet {
                stem,
                enc_cell0,
                down0,
                enc_cell1,
                down1,
                mid_cell,
                up1,
                mix1,
                dec_cell1,
                up0,
                mix0,
                dec_cell0,
                head,
            } => {
                for l in [stem, down0, down1, mix1, mix0, head] {
                    l.weight = f(&l.weight);
                    l.bias = f(&l.bias);
                }
                for l in [up1, up0] {
                    l.weight = f(&l.weight);
                    l.bias = f(&l.bias);
                }
                for c in [enc_cell0, enc_cell1, mid_cell, dec_cell1, dec_cell0] {
                    *c = remap_cell(c, &f);
                }
            }
            Net::Dcnn121 { cells, head } => {
                for c in cells.iter_mut() {
                    *c = remap_cell(c, &f);
                }
                head.weight = f(&head.weight);
                head.bias = f(&head.bias);
            }
        }
    }
}

fn remap_cell<E: Element>(cell: &ConvLSTMCell<E>, f: &impl Fn(&Tensor<E>) -> Tensor<E>) -> ConvLSTMCell<E> {
    ConvLSTMCell::from_parts(
        f(cell.weight()),
        f(cell.bias()),
        cell.in_channels(),
        cell.hidden(),
        *cell.spec(),
    )
    .expect("shapes preserved")
}
