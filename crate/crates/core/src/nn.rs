//! Forward-only evaluation of serialized networks and the composed reconstruction
//! pipeline.
//!
//! A [`WeightBundle`] is an ordered list of layers stored in an LSTG container: a
//! JSON `arch` manifest plus `layerN.weight` / `layerN.bias` arrays. Dense stacks
//! act on `[rows, width]` tensors and may splice in external tensors at
//! [`Layer::FuseConcat`] ports. Convolution stacks act on `[C, X, Y, Z]` volumes
//! and expose intermediate activations through tap indices.

pub mod fixtures;

use std::path::Path;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::grids::{
    disentangle_queries, multiscale_features, voxelize_points, FeatureMap2D, ScalarGrid, VoxelGrid,
};
use crate::lstg::Container;
use crate::mesh::PointCloud;
use crate::surface::{build_query_grid, IsoGridSpec};
use crate::tensor::Tensor;

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
    None,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::None => x,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How a localization network's raw 2-D output becomes image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMap {
    Sigmoid,
    Clamp,
}

/// Fully connected layer, `y = act(x · W + b)` with `W` stored `input × output`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(input: usize, output: usize, weight: Vec<f32>, bias: Vec<f32>, activation: Activation) -> Result<Self> {
        if input == 0 || output == 0 {
            return Err(Error::InvalidBundle("dense layer with zero width".into()));
        }
        check_len("dense weight", input * output, weight.len())?;
        check_len("dense bias", output, bias.len())?;
        Ok(Self {
            input,
            output,
            weight,
            bias,
            activation,
        })
    }
}

/// 3-D cross-correlation with zero padding. Weight layout `[out, in, k, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
        activation: Activation,
    ) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 {
            return Err(Error::InvalidBundle(format!(
                "conv3d needs positive channels, kernel and stride (in {in_ch}, out {out_ch}, k {kernel}, s {stride})"
            )));
        }
        check_len("conv3d weight", out_ch * in_ch * kernel.pow(3), weight.len())?;
        check_len("conv3d bias", out_ch, bias.len())?;
        Ok(Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weight,
            bias,
            activation,
        })
    }

    pub fn output_extent(&self, d: usize) -> Result<usize> {
        let padded = d + 2 * self.padding;
        if self.kernel > padded {
            return Err(Error::KernelTooLarge {
                kernel: self.kernel,
                padded,
            });
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    fn w(&self, o: usize, i: usize, a: usize, b: usize, c: usize) -> f32 {
        let k = self.kernel;
        self.weight[(((o * self.in_ch + i) * k + a) * k + b) * k + c]
    }
}

fn check_len(what: &str, want: usize, got: usize) -> Result<()> {
    if want != got {
        return Err(Error::InvalidBundle(format!("{what} has {got} values, expected {want}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv3d(Conv3d),
    /// Concatenates an externally bound tensor onto the running activations.
    FuseConcat { port: String },
}

pub fn dense_forward(layer: &Dense, x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 || x.last_dim() != layer.input {
        return Err(Error::ShapeMismatch(format!(
            "dense layer expects width {}, got dims {:?}",
            layer.input,
            x.dims()
        )));
    }
    let rows = x.rows();
    let mut out = vec![0.0f32; rows * layer.output];
    let (n_in, n_out) = (layer.input, layer.output);
    out.par_chunks_mut(n_out)
        .zip(x.data().par_chunks(n_in))
        .for_each_init(
            || vec![0.0f64; n_out],
            |acc, (y, xi)| {
                for (a, &b) in acc.iter_mut().zip(&layer.bias) {
                    *a = b as f64;
                }
                for (i, &v) in xi.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let v = v as f64;
                    let wrow = &layer.weight[i * n_out..(i + 1) * n_out];
                    for (a, &w) in acc.iter_mut().zip(wrow) {
                        *a += v * w as f64;
                    }
                }
                for (o, a) in y.iter_mut().zip(acc.iter()) {
                    *o = layer.activation.apply(*a) as f32;
                }
            },
        );
    let mut dims = x.dims().to_vec();
    *dims.last_mut().expect("rank checked above") = n_out;
    Tensor::new(dims, out)
}

pub fn conv3d_forward(layer: &Conv3d, x: &Tensor) -> Result<Tensor> {
    let [c, dx, dy, dz] = match *x.dims() {
        [c, a, b, d] => [c, a, b, d],
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "conv3d expects a [C, X, Y, Z] volume, got {:?}",
                x.dims()
            )))
        }
    };
    if c != layer.in_ch {
        return Err(Error::ShapeMismatch(format!(
            "conv3d expects {} input channels, got {c}",
            layer.in_ch
        )));
    }
    let (ox, oy, oz) = (
        layer.output_extent(dx)?,
        layer.output_extent(dy)?,
        layer.output_extent(dz)?,
    );
    let (k, s, p) = (layer.kernel, layer.stride, layer.padding);
    let input = x.data();
    // output positions along an axis whose tap `t` stays inside [0, n)
    let valid = |t: usize, n: usize, o_len: usize| -> (usize, usize) {
        let lo = if t >= p { 0 } else { (p - t).div_ceil(s) };
        let hi = if n + p > t { ((n + p - t - 1) / s + 1).min(o_len) } else { 0 };
        (lo, hi.max(lo))
    };
    let mut out = vec![0.0f32; layer.out_ch * ox * oy * oz];
    out.par_chunks_mut(oy * oz).enumerate().for_each(|(slab, y)| {
        let (o, xo) = (slab / ox, slab % ox);
        let mut acc = vec![layer.bias[o] as f64; oy * oz];
        for i in 0..c {
            let vol = &input[i * dx * dy * dz..(i + 1) * dx * dy * dz];
            for a in 0..k {
                let xi = xo * s + a;
                if xi < p || xi - p >= dx {
                    continue;
                }
                let plane = &vol[(xi - p) * dy * dz..(xi - p + 1) * dy * dz];
                for b in 0..k {
                    let (ylo, yhi) = valid(b, dy, oy);
                    for cc in 0..k {
                        let w = layer.w(o, i, a, b, cc) as f64;
                        if w == 0.0 {
                            continue;
                        }
                        let (zlo, zhi) = valid(cc, dz, oz);
                        for yo in ylo..yhi {
                            let row = &plane[(yo * s + b - p) * dz..];
                            let dst = &mut acc[yo * oz..(yo + 1) * oz];
                            for zo in zlo..zhi {
                                dst[zo] += w * row[zo * s + cc - p] as f64;
                            }
                        }
                    }
                }
            }
        }
        for (dst, v) in y.iter_mut().zip(acc) {
            *dst = layer.activation.apply(v) as f32;
        }
    });
    Tensor::new(vec![layer.out_ch, ox, oy, oz], out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerSpec {
    Dense {
        #[serde(rename = "in")]
        input: usize,
        #[serde(rename = "out")]
        output: usize,
        activation: Activation,
    },
    Conv3d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        activation: Activation,
    },
    FuseConcat {
        port: String,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Serialize, Deserialize)]
struct Arch {
    layers: Vec<LayerSpec>,
    #[serde(default)]
    taps: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output_map: Option<OutputMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Dense,
    Conv,
}

/// Immutable, validated network description with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    layers: Vec<Layer>,
    taps: Vec<usize>,
    output_map: Option<OutputMap>,
}

impl WeightBundle {
    pub fn new(layers: Vec<Layer>, taps: Vec<usize>, output_map: Option<OutputMap>) -> Result<Self> {
        let b = Self {
            layers,
            taps,
            output_map,
        };
        b.kind()?;
        Ok(b)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn output_map(&self) -> Option<OutputMap> {
        self.output_map
    }

    pub fn ports(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::FuseConcat { port } => Some(port.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Activation of the last parametric layer.
    pub fn final_activation(&self) -> Option<Activation> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Dense(d) => Some(d.activation),
            Layer::Conv3d(c) => Some(c.activation),
            Layer::FuseConcat { .. } => None,
        })
    }

    /// Output width of the last parametric layer.
    pub fn output_width(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Dense(d) => Some(d.output),
            Layer::Conv3d(c) => Some(c.out_ch),
            Layer::FuseConcat { .. } => None,
        })
    }

    fn kind(&self) -> Result<Kind> {
        let bad = |m: String| Err(Error::InvalidBundle(m));
        if self.layers.is_empty() {
            return bad("bundle has no layers".into());
        }
        let convs = self.layers.iter().filter(|l| matches!(l, Layer::Conv3d(_))).count();
        let kind = match convs {
            0 => Kind::Dense,
            n if n == self.layers.len() => Kind::Conv,
            _ => return bad("bundle mixes conv3d with dense or fuse layers".into()),
        };
        if self.output_width().is_none() {
            return bad("bundle has no parametric layer".into());
        }
        let mut ports = self.ports();
        ports.sort_unstable();
        if ports.windows(2).any(|w| w[0] == w[1]) {
            return bad("port declared twice".into());
        }
        if self.taps.iter().any(|&t| t >= self.layers.len()) || self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("taps {:?} must be increasing layer indices", self.taps));
        }
        // width chaining; a fuse makes the next width known only at run time
        let mut width: Option<usize> = None;
        for (i, l) in self.layers.iter().enumerate() {
            let (input, output) = match l {
                Layer::Dense(d) => (d.input, d.output),
                Layer::Conv3d(c) => (c.in_ch, c.out_ch),
                Layer::FuseConcat { .. } => {
                    width = None;
                    continue;
                }
            };
            if let Some(w) = width {
                if w != input {
                    return bad(format!("layer {i} expects width {input}, previous layer gives {w}"));
                }
            }
            width = Some(output);
        }
        Ok(kind)
    }

    /// Runs a dense stack. `ports` binds every declared fuse port to a tensor with
    /// either one row (broadcast) or as many rows as `x`.
    pub fn forward_dense(&self, x: &Tensor, ports: &[(&str, &Tensor)]) -> Result<Tensor> {
        if self.kind()? != Kind::Dense {
            return Err(Error::InvalidBundle("expected a dense bundle".into()));
        }
        let declared = self.ports();
        if let Some((name, _)) = ports.iter().find(|(n, _)| !declared.contains(n)) {
            return Err(Error::UnknownPort(name.to_string()));
        }
        let mut h = x.clone();
        for l in &self.layers {
            h = match l {
                Layer::Dense(d) => dense_forward(d, &h)?,
                Layer::FuseConcat { port } => {
                    let (_, t) = ports
                        .iter()
                        .find(|(n, _)| n == port)
                        .ok_or_else(|| Error::UnboundPort(port.clone()))?;
                    fuse(&h, t)?
                }
                Layer::Conv3d(_) => unreachable!("kind checked"),
            };
        }
        Ok(h)
    }

    /// Runs a convolution stack, returning the final volume and every tapped one.
    pub fn forward_conv(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        if self.kind()? != Kind::Conv {
            return Err(Error::InvalidBundle("expected a conv3d bundle".into()));
        }
        let mut h = x.clone();
        let mut taps = Vec::with_capacity(self.taps.len());
        for (i, l) in self.layers.iter().enumerate() {
            if let Layer::Conv3d(c) = l {
                h = conv3d_forward(c, &h)?;
            }
            if self.taps.contains(&i) {
                taps.push(h.clone());
            }
        }
        Ok((h, taps))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        let mut specs = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            specs.push(match l {
                Layer::Dense(d) => {
                    c.insert_f32(format!("layer{i}.weight"), &[d.input, d.output], d.weight.clone())?;
                    c.insert_f32(format!("layer{i}.bias"), &[d.output], d.bias.clone())?;
                    LayerSpec::Dense {
                        input: d.input,
                        output: d.output,
                        activation: d.activation,
                    }
                }
                Layer::Conv3d(v) => {
                    let k = v.kernel;
                    c.insert_f32(format!("layer{i}.weight"), &[v.out_ch, v.in_ch, k, k, k], v.weight.clone())?;
                    c.insert_f32(format!("layer{i}.bias"), &[v.out_ch], v.bias.clone())?;
                    LayerSpec::Conv3d {
                        in_ch: v.in_ch,
                        out_ch: v.out_ch,
                        kernel: k,
                        stride: v.stride,
                        padding: v.padding,
                        activation: v.activation,
                    }
                }
                Layer::FuseConcat { port } => LayerSpec::FuseConcat { port: port.clone() },
            });
        }
        let arch = Arch {
            layers: specs,
            taps: self.taps.clone(),
            output_map: self.output_map,
        };
        let json = serde_json::to_vec(&arch).map_err(|e| Error::InvalidBundle(e.to_string()))?;
        c.insert_u8("arch", &[json.len()], json)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (_, json) = c.u8("arch")?;
        let arch: Arch =
            serde_json::from_slice(json).map_err(|e| Error::InvalidBundle(format!("arch manifest: {e}")))?;
        let param = |i: usize, what: &str| -> Result<Vec<f32>> {
            let (_, data) = c.f32(&format!("layer{i}.{what}"))?;
            Ok(data.to_vec())
        };
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (i, spec) in arch.layers.into_iter().enumerate() {
            layers.push(match spec {
                LayerSpec::Dense {
                    input,
                    output,
                    activation,
                } => Layer::Dense(Dense::new(input, output, param(i, "weight")?, param(i, "bias")?, activation)?),
                LayerSpec::Conv3d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                    activation,
                } => Layer::Conv3d(Conv3d::new(
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                    param(i, "weight")?,
                    param(i, "bias")?,
                    activation,
                )?),
                LayerSpec::FuseConcat { port } => Layer::FuseConcat { port },
            });
        }
        Self::new(layers, arch.taps, arch.output_map)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }
}

fn fuse(h: &Tensor, t: &Tensor) -> Result<Tensor> {
    if h.rank() != 2 {
        return Err(Error::ShapeMismatch(format!("fuse expects [rows, width], got {:?}", h.dims())));
    }
    let rows = h.rows();
    let port_rows = if t.rank() <= 1 { 1 } else { t.rows() };
    let width = if t.rank() == 0 { 1 } else { t.last_dim() };
    let expanded = if port_rows == rows {
        Tensor::new(vec![rows, width], t.data().to_vec())?
    } else if port_rows == 1 {
        let mut data = Vec::with_capacity(rows * width);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        Tensor::new(vec![rows, width], data)?
    } else {
        return Err(Error::ShapeMismatch(format!(
            "port tensor has {port_rows} rows, activations have {rows}"
        )));
    };
    Tensor::concat_columns(&[h, &expanded])
}

fn points_tensor(points: &[Vec3]) -> Tensor {
    let data = points.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    Tensor::new(vec![points.len(), 3], data).expect("three values per point")
}

/// Probabilistic occupancy from a binary grid. The bundle must end in a sigmoid
/// and keep a single channel at the input resolution.
pub fn refine_occupancy(gamma: &WeightBundle, u: &VoxelGrid) -> Result<ScalarGrid> {
    if gamma.final_activation() != Some(Activation::Sigmoid) {
        return Err(Error::InvalidBundle("occupancy network must end in a sigmoid".into()));
    }
    let m = u.resolution();
    let x = u.to_scalar().to_tensor();
    let (y, _) = gamma.forward_conv(&x)?;
    if y.dims() != [1, m, m, m] {
        return Err(Error::ShapeMismatch(format!(
            "occupancy network maps {m}³ to {:?}, expected [1, {m}, {m}, {m}]",
            y.dims()
        )));
    }
    ScalarGrid::from_tensor(y, *u.extent())
}

/// Feature pyramid: the activation volume after each tap layer, all sharing the
/// extent of the input grid.
pub fn encode_grid(xi: &WeightBundle, v: &ScalarGrid) -> Result<Vec<ScalarGrid>> {
    if xi.taps().is_empty() {
        return Err(Error::InvalidBundle("feature network declares no taps".into()));
    }
    let (_, taps) = xi.forward_conv(&v.to_tensor())?;
    taps.into_iter()
        .map(|t| ScalarGrid::from_tensor(t, *v.extent()))
        .collect()
}

/// Image-plane coordinates per query, nominally in `[0, 1]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizedQueries {
    pub uv: Vec<[f64; 2]>,
}

/// Maps queries into the image feature plane. The bundle's single fuse port
/// receives the concatenation of the flattened global features.
pub fn localize_queries(theta: &WeightBundle, z_img: &Tensor, z_pts: &Tensor, queries: &[Vec3]) -> Result<LocalizedQueries> {
    let ports = theta.ports();
    let port = match ports.as_slice() {
        [p] => *p,
        [] => return Err(Error::InvalidBundle("localization network declares no fuse port".into())),
        _ => return Err(Error::InvalidBundle("localization network declares several fuse ports".into())),
    };
    if theta.final_activation() != Some(Activation::None) || theta.output_width() != Some(2) {
        return Err(Error::InvalidBundle(
            "localization network must end in a linear layer of width 2".into(),
        ));
    }
    let global: Vec<f32> = z_img.data().iter().chain(z_pts.data()).copied().collect();
    let global = Tensor::new(vec![global.len()], global)?;
    let y = theta.forward_dense(&points_tensor(queries), &[(port, &global)])?;
    let map = theta.output_map().unwrap_or(OutputMap::Sigmoid);
    let uv = (0..y.rows())
        .map(|r| {
            let row = y.row(r);
            let f = |v: f32| match map {
                OutputMap::Sigmoid => sigmoid(v as f64),
                OutputMap::Clamp => (v as f64).clamp(0.0, 1.0),
            };
            [f(row[0]), f(row[1])]
        })
        .collect();
    Ok(LocalizedQueries { uv })
}

/// Local features: bilinear samples of the image feature map at each localized query.
pub fn sample_local_features(map: &FeatureMap2D, q: &LocalizedQueries) -> Tensor {
    let c = map.channels();
    let mut data = vec![0.0f32; q.uv.len() * c];
    data.par_chunks_mut(c)
        .zip(q.uv.par_iter())
        .for_each(|(row, uv)| map.sample_into(*uv, row));
    Tensor::new(vec![q.uv.len(), c], data).expect("row count matches")
}

/// Signed distance per query from the fused coarse and local features. Negative
/// values are inside.
pub fn predict_sdf(psi: &WeightBundle, f_c: &Tensor, f_l: &Tensor) -> Result<Vec<f32>> {
    if f_c.rows() != f_l.rows() {
        return Err(Error::ShapeMismatch(format!(
            "feature row counts differ: {} vs {}",
            f_c.rows(),
            f_l.rows()
        )));
    }
    if psi.output_width() != Some(1) {
        return Err(Error::ShapeMismatch("sdf network must produce one value per query".into()));
    }
    let x = Tensor::concat_columns(&[f_c, f_l])?;
    Ok(psi.forward_dense(&x, &[])?.into_data())
}

/// Everything the reconstruction consumes, already decoded.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub coarse: PointCloud,
    pub local: FeatureMap2D,
    pub z_img: Tensor,
    pub z_pts: Tensor,
    pub gamma: WeightBundle,
    pub xi: WeightBundle,
    pub theta: WeightBundle,
    pub psi: WeightBundle,
}

pub const COARSE_FILE: &str = "coarse.lstg";
pub const LOCAL_FILE: &str = "local_features.lstg";
pub const GLOBAL_FILE: &str = "global_features.lstg";
pub const BUNDLE_FILES: [&str; 4] = ["gamma.lstg", "xi.lstg", "theta.lstg", "psi.lstg"];

impl PipelineInputs {
    /// Reads `coarse.lstg` (`points`), `local_features.lstg` (`features`, `[C, H, W]`)
    /// and `global_features.lstg` (`z_img`, `z_pts`) from `inputs_dir`, and the four
    /// bundles from `bundles_dir`.
    pub fn load(inputs_dir: &Path, bundles_dir: &Path) -> Result<Self> {
        let coarse = PointCloud::from_container(&Container::read(inputs_dir.join(COARSE_FILE))?)?;
        let local = Container::read(inputs_dir.join(LOCAL_FILE))?;
        let local = FeatureMap2D::from_tensor(&Tensor::from_container(&local, "features")?)?;
        let global = Container::read(inputs_dir.join(GLOBAL_FILE))?;
        let z_img = Tensor::from_container(&global, "z_img")?;
        let z_pts = Tensor::from_container(&global, "z_pts")?;
        let [gamma, xi, theta, psi] = BUNDLE_FILES.map(|f| bundles_dir.join(f));
        Ok(Self {
            coarse,
            local,
            z_img,
            z_pts,
            gamma: WeightBundle::read(gamma)?,
            xi: WeightBundle::read(xi)?,
            theta: WeightBundle::read(theta)?,
            psi: WeightBundle::read(psi)?,
        })
    }

    pub fn save(&self, inputs_dir: &Path, bundles_dir: &Path) -> Result<()> {
        self.coarse.to_container()?.write(inputs_dir.join(COARSE_FILE))?;
        let mut local = Container::new();
        let m = &self.local;
        let mut data = Vec::with_capacity(m.channels() * m.height() * m.width());
        for c in 0..m.channels() {
            for y in 0..m.height() {
                for x in 0..m.width() {
                    data.push(m.get(c, y, x));
                }
            }
        }
        local.insert_f32("features", &[m.channels(), m.height(), m.width()], data)?;
        local.write(inputs_dir.join(LOCAL_FILE))?;
        let mut global = Container::new();
        self.z_img.insert_into(&mut global, "z_img")?;
        self.z_pts.insert_into(&mut global, "z_pts")?;
        global.write(inputs_dir.join(GLOBAL_FILE))?;
        for (b, f) in [&self.gamma, &self.xi, &self.theta, &self.psi].into_iter().zip(BUNDLE_FILES) {
            b.write(bundles_dir.join(f))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Occupancy resolution of the coarse-cloud voxel grid.
    pub occupancy_res: usize,
    /// Query lattice and output grid.
    pub grid: IsoGridSpec,
    /// Neighbour offset in the feature-volume frame; defaults to one occupancy voxel.
    pub neighbor_d: Option<f64>,
    pub batch_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            occupancy_res: 128,
            grid: IsoGridSpec::default(),
            neighbor_d: None,
            batch_size: 32768,
        }
    }
}

impl PipelineConfig {
    pub fn neighbor_offset(&self) -> f64 {
        self.neighbor_d
            .unwrap_or_else(|| feature_extent().size().x / self.occupancy_res as f64)
    }
}

/// Extent of the occupancy grid and feature volumes. Queries enter this frame
/// through [`disentangle_queries`], which maps the unit cube onto it.
pub fn feature_extent() -> Aabb {
    Aabb::cube(1.0)
}

/// Per-object state shared by every query batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub occupancy: VoxelGrid,
    pub refined: ScalarGrid,
    pub pyramid: Vec<ScalarGrid>,
}

/// Voxelizes the coarse cloud in the feature frame, refines it, and builds the pyramid.
pub fn encode_inputs(inputs: &PipelineInputs, cfg: &PipelineConfig) -> Result<Encoded> {
    let moved = PointCloud::new(disentangle_queries(&inputs.coarse.points));
    let vox = voxelize_points(&moved, cfg.occupancy_res, feature_extent()).map_err(|e| e.at_stage("voxelize"))?;
    if vox.clamped > 0 {
        warn!("{} coarse points fell outside the occupancy grid and were clamped", vox.clamped);
    }
    let refined = refine_occupancy(&inputs.gamma, &vox.grid).map_err(|e| e.at_stage("refine"))?;
    let pyramid = encode_grid(&inputs.xi, &refined).map_err(|e| e.at_stage("encode"))?;
    debug!(
        "pyramid levels: {:?}",
        pyramid.iter().map(|g| (g.dims(), g.channels())).collect::<Vec<_>>()
    );
    Ok(Encoded {
        occupancy: vox.grid,
        refined,
        pyramid,
    })
}

/// Signed distances for one batch of queries given in the unit-cube frame.
pub fn predict_queries(inputs: &PipelineInputs, enc: &Encoded, queries: &[Vec3], d: f64) -> Result<Vec<f32>> {
    let f_c = multiscale_features(&enc.pyramid, &disentangle_queries(queries), d)
        .map_err(|e| e.at_stage("multiscale"))?;
    let loc = localize_queries(&inputs.theta, &inputs.z_img, &inputs.z_pts, queries).map_err(|e| e.at_stage("localize"))?;
    let f_l = sample_local_features(&inputs.local, &loc);
    predict_sdf(&inputs.psi, &f_c, &f_l).map_err(|e| e.at_stage("predict"))
}

/// Full reconstruction to a signed-distance grid over `cfg.grid`.
pub fn run_pipeline(inputs: &PipelineInputs, cfg: &PipelineConfig) -> Result<ScalarGrid> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let enc = encode_inputs(inputs, cfg)?;
    let queries = build_query_grid(&cfg.grid).map_err(|e| e.at_stage("query_grid"))?;
    let d = cfg.neighbor_offset();
    let mut values = Vec::with_capacity(queries.len());
    for batch in queries.chunks(cfg.batch_size) {
        values.extend(predict_queries(inputs, &enc, batch, d)?);
    }
    cfg.grid.grid_from_values(values).map_err(|e| e.at_stage("predict"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dense_identity_and_constant() {
        let eye: Vec<f32> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let d = Dense::new(3, 3, eye, vec![0.0; 3], Activation::None).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 0.25, -7.0]).unwrap();
        assert_eq!(dense_forward(&d, &x).unwrap(), x);

        let c = Dense::new(3, 2, vec![0.0; 6], vec![0.7, -1.5], Activation::None).unwrap();
        let y = dense_forward(&c, &x).unwrap();
        assert_eq!(y.dims(), &[2, 2]);
        assert_eq!(y.data(), &[0.7, -1.5, 0.7, -1.5]);
        assert!(matches!(dense_forward(&c, &Tensor::zeros(vec![2, 4])), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::LeakyRelu.apply(-1.0), -0.2);
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        let s: Activation = serde_json::from_str("\"leaky_relu\"").unwrap();
        assert_eq!(s, Activation::LeakyRelu);
    }

    #[test]
    fn conv_identity_and_ones() {
        let id = Conv3d::new(1, 1, 1, 1, 0, vec![1.0], vec![0.0], Activation::None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![1, 4, 5, 3], rand_vec(&mut rng, 60)).unwrap();
        assert_eq!(conv3d_forward(&id, &x).unwrap(), x);

        let ones = Conv3d::new(1, 1, 3, 1, 1, vec![1.0; 27], vec![0.0], Activation::None).unwrap();
        let y = conv3d_forward(&ones, &Tensor::filled(vec![1, 5, 5, 5], 1.0)).unwrap();
        assert_eq!(y.dims(), &[1, 5, 5, 5]);
        assert_eq!(y.data()[(2 * 5 + 2) * 5 + 2], 27.0);
        assert_eq!(y.data()[0], 8.0);
    }

    #[test]
    fn conv_extents() {
        let c = Conv3d::new(1, 2, 3, 2, 1, vec![0.0; 54], vec![0.0; 2], Activation::Relu).unwrap();
        assert_eq!(c.output_extent(128).unwrap(), 64);
        assert_eq!(c.output_extent(64).unwrap(), 32);
        let big = Conv3d::new(1, 1, 5, 1, 0, vec![0.0; 125], vec![0.0], Activation::None).unwrap();
        assert!(matches!(
            conv3d_forward(&big, &Tensor::zeros(vec![1, 4, 9, 9])),
            Err(Error::KernelTooLarge { kernel: 5, padded: 4 })
        ));
        assert!(matches!(
            conv3d_forward(&c, &Tensor::zeros(vec![2, 4, 4, 4])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn dense(i: usize, o: usize, w: f32, b: f32, act: Activation) -> Layer {
        Layer::Dense(Dense::new(i, o, vec![w; i * o], vec![b; o], act).unwrap())
    }

    #[test]
    fn bundle_validation() {
        assert!(WeightBundle::new(vec![], vec![], None).is_err());
        assert!(WeightBundle::new(
            vec![dense(3, 4, 0.0, 0.0, Activation::Relu), dense(5, 1, 0.0, 0.0, Activation::None)],
            vec![],
            None
        )
        .is_err());
        let conv = Layer::Conv3d(Conv3d::new(1, 1, 1, 1, 0, vec![1.0], vec![0.0], Activation::None).unwrap());
        assert!(WeightBundle::new(vec![conv.clone(), dense(1, 1, 0.0, 0.0, Activation::None)], vec![], None).is_err());
        assert!(WeightBundle::new(vec![conv.clone()], vec![1], None).is_err());
        let dup = vec![
            Layer::FuseConcat { port: "g".into() },
            Layer::FuseConcat { port: "g".into() },
            dense(2, 1, 0.0, 0.0, Activation::None),
        ];
        assert!(WeightBundle::new(dup, vec![], None).is_err());
    }

    #[test]
    fn ports_bind_exactly() {
        let b = WeightBundle::new(
            vec![
                dense(3, 2, 1.0, 0.0, Activation::None),
                Layer::FuseConcat { port: "g".into() },
                dense(4, 1, 1.0, 0.0, Activation::None),
            ],
            vec![],
            None,
        )
        .unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![10.0, 20.0]).unwrap();
        let y = b.forward_dense(&x, &[("g", &g)]).unwrap();
        assert_eq!(y.data(), &[32.0, 34.0]);
        assert!(matches!(b.forward_dense(&x, &[]), Err(Error::UnboundPort(p)) if p == "g"));
        assert!(matches!(
            b.forward_dense(&x, &[("g", &g), ("h", &g)]),
            Err(Error::UnknownPort(p)) if p == "h"
        ));
        let per_row = Tensor::new(vec![2, 2], vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(b.forward_dense(&x, &[("g", &per_row)]).unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn bundle_container_round_trip() {
        let b = fixtures::theta_bundle(3, 8);
        let c = Container::from_bytes(&b.to_container().unwrap().to_bytes()).unwrap();
        assert_eq!(WeightBundle::from_container(&c).unwrap(), b);
        let g = fixtures::xi_bundle(4);
        assert_eq!(WeightBundle::from_container(&g.to_container().unwrap()).unwrap(), g);
        assert!(matches!(WeightBundle::from_container(&Container::new()), Err(Error::MissingEntry(_))));
    }

    fn zero_conv(i: usize, o: usize, k: usize, bias: f32, act: Activation) -> Layer {
        Layer::Conv3d(Conv3d::new(i, o, k, 1, k / 2, vec![0.0; i * o * k * k * k], vec![bias; o], act).unwrap())
    }

    #[test]
    fn refine_trivial_cases() {
        let u = voxelize_points(&PointCloud::new(vec![Vec3::zeros()]), 8, Aabb::unit()).unwrap().grid;
        let zero = WeightBundle::new(vec![zero_conv(1, 1, 3, 0.0, Activation::Sigmoid)], vec![], None).unwrap();
        let v = refine_occupancy(&zero, &u).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.5));
        let big = WeightBundle::new(vec![zero_conv(1, 1, 3, 40.0, Activation::Sigmoid)], vec![], None).unwrap();
        assert!(refine_occupancy(&big, &u).unwrap().data().iter().all(|&x| (1.0 - x) <= 1e-6));
        let relu = WeightBundle::new(vec![zero_conv(1, 1, 3, 0.0, Activation::Relu)], vec![], None).unwrap();
        assert!(matches!(refine_occupancy(&relu, &u), Err(Error::InvalidBundle(_))));
        let two = WeightBundle::new(vec![zero_conv(1, 2, 3, 0.0, Activation::Sigmoid)], vec![], None).unwrap();
        assert!(matches!(refine_occupancy(&two, &u), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn encode_taps() {
        let v = ScalarGrid::from_fn([8, 8, 8], Aabb::unit(), |p| p.x);
        let id = WeightBundle::new(
            vec![Layer::Conv3d(Conv3d::new(1, 1, 1, 1, 0, vec![1.0], vec![0.0], Activation::None).unwrap())],
            vec![0],
            None,
        )
        .unwrap();
        assert_eq!(encode_grid(&id, &v).unwrap(), vec![v.clone()]);
        let none = WeightBundle::new(id.layers().to_vec(), vec![], None).unwrap();
        assert!(encode_grid(&none, &v).is_err());

        let big = ScalarGrid::filled([128; 3], 1, Aabb::unit(), 0.0);
        let stride = |i, o| Layer::Conv3d(Conv3d::new(i, o, 3, 2, 1, vec![0.0; i * o * 27], vec![0.0; o], Activation::Relu).unwrap());
        let b = WeightBundle::new(vec![stride(1, 2), stride(2, 2)], vec![0, 1], None).unwrap();
        let p = encode_grid(&b, &big).unwrap();
        assert_eq!(p[0].dims(), [64; 3]);
        assert_eq!(p[1].dims(), [32; 3]);
        assert_eq!(p[1].extent(), big.extent());
    }

    fn theta_zero(global: usize) -> WeightBundle {
        WeightBundle::new(
            vec![
                dense(3, 4, 0.0, 0.0, Activation::Relu),
                Layer::FuseConcat { port: "global".into() },
                dense(4 + global, 2, 0.0, 0.0, Activation::None),
            ],
            vec![],
            None,
        )
        .unwrap()
    }

    #[test]
    fn localize_trivial_cases() {
        let z = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let w = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let q = [Vec3::zeros(), Vec3::new(0.3, -0.2, 0.1)];
        let loc = localize_queries(&theta_zero(3), &z, &w, &q).unwrap();
        assert_eq!(loc.uv, vec![[0.5, 0.5]; 2]);

        // first layer ignores the query; every point lands on one spot
        let mut layers = theta_zero(3).layers().to_vec();
        layers[2] = dense(7, 2, 0.3, 0.1, Activation::None);
        let b = WeightBundle::new(layers, vec![], None).unwrap();
        let loc = localize_queries(&b, &z, &w, &q).unwrap();
        assert_eq!(loc.uv[0], loc.uv[1]);
        assert!(matches!(
            localize_queries(&theta_zero(5), &z, &w, &q),
            Err(Error::ShapeMismatch(_))
        ));
        let sig = WeightBundle::new(
            vec![Layer::FuseConcat { port: "g".into() }, dense(3, 2, 0.0, 0.0, Activation::Sigmoid)],
            vec![],
            None,
        )
        .unwrap();
        assert!(matches!(localize_queries(&sig, &z, &w, &q), Err(Error::InvalidBundle(_))));
    }

    #[test]
    fn localize_clamp_map() {
        let b = WeightBundle::new(
            vec![
                Layer::FuseConcat { port: "global".into() },
                dense(5, 2, 0.0, 3.0, Activation::None),
            ],
            vec![],
            Some(OutputMap::Clamp),
        )
        .unwrap();
        let z = Tensor::zeros(vec![1]);
        let loc = localize_queries(&b, &z, &z, &[Vec3::zeros()]).unwrap();
        assert_eq!(loc.uv, vec![[1.0, 1.0]]);
    }

    #[test]
    fn predict_constant_bias() {
        let psi = WeightBundle::new(vec![dense(5, 1, 0.0, -0.25, Activation::None)], vec![], None).unwrap();
        let f_c = Tensor::filled(vec![4, 3], 1.0);
        let f_l = Tensor::filled(vec![4, 2], 1.0);
        let out = predict_sdf(&psi, &f_c, &f_l).unwrap();
        assert_eq!(out, vec![-0.25; 4]);
        assert!(out.iter().all(|&v| v < 0.0));
        assert!(matches!(
            predict_sdf(&psi, &f_c, &Tensor::filled(vec![3, 2], 1.0)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn predict_is_row_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let psi = fixtures::psi_bundle(5, 10);
        let f_c = Tensor::new(vec![16, 6], rand_vec(&mut rng, 96)).unwrap();
        let f_l = Tensor::new(vec![16, 4], rand_vec(&mut rng, 64)).unwrap();
        let base = predict_sdf(&psi, &f_c, &f_l).unwrap();
        let perm: Vec<usize> = (0..16).rev().collect();
        let moved = predict_sdf(&psi, &f_c.gather_rows(&perm), &f_l.gather_rows(&perm)).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(moved[i], base[p]);
        }
    }

    #[test]
    fn zero_bundles_give_constant_grid() {
        let mut inputs = fixtures::pipeline_inputs(0);
        let width = match &inputs.psi.layers()[0] {
            Layer::Dense(d) => d.input,
            _ => unreachable!(),
        };
        inputs.psi = WeightBundle::new(vec![dense(width, 1, 0.0, 0.4, Activation::None)], vec![], None).unwrap();
        let cfg = PipelineConfig {
            occupancy_res: 16,
            grid: IsoGridSpec::cubic(6),
            ..PipelineConfig::default()
        };
        let g = run_pipeline(&inputs, &cfg).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.4));
        assert!(crate::surface::marching_cubes(&g, 0.0).unwrap().empty);
    }

    #[test]
    fn stage_errors_are_annotated() {
        let mut inputs = fixtures::pipeline_inputs(0);
        inputs.theta = theta_zero(1);
        let cfg = PipelineConfig {
            occupancy_res: 16,
            grid: IsoGridSpec::cubic(4),
            ..PipelineConfig::default()
        };
        match run_pipeline(&inputs, &cfg) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "localize"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
