//! U-Net feature extractor and the fully connected coordinate heads.
//!
//! A stacked model is a U-Net (image -> single-channel map of the same
//! size) followed by a head (flattened map -> hidden layer -> coordinates).
//! The boundary model's head emits the four box values, the landmark
//! model's head emits the 136 flattened landmark coordinates.

use std::collections::BTreeMap;
use std::path::Path;

pub use candle_core::DType;
use candle_core::{Device, Tensor, Var};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels;
use crate::face::FaceImage;
use crate::landmarks::{BoundaryBox, LandmarkSet, FLAT_LEN};
use crate::INPUT_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub input_size: usize,
    /// Number of down-sampling steps (each followed by a 2x2 max pool).
    pub levels: usize,
    /// Channels of the first level; doubled at every level below.
    pub base_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            input_size: INPUT_SIZE,
            levels: 4,
            base_channels: 64,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 {
            return Err(Error::Config("levels and base_channels must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % (1 << self.levels) != 0 {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size, self.levels
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Boundary,
    Landmarks,
}

impl HeadKind {
    pub fn outputs(&self) -> usize {
        match self {
            HeadKind::Boundary => 4,
            HeadKind::Landmarks => FLAT_LEN,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Boundary => "boundary",
            HeadKind::Landmarks => "landmark",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub flatten_size: usize,
    pub hidden: usize,
    pub out: usize,
}

impl HeadConfig {
    pub fn new(kind: HeadKind) -> Self {
        Self {
            flatten_size: INPUT_SIZE * INPUT_SIZE,
            hidden: 1024,
            out: kind.outputs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flatten_size != INPUT_SIZE * INPUT_SIZE {
            return Err(Error::Config(format!(
                "head expects {} inputs, got {}",
                INPUT_SIZE * INPUT_SIZE,
                self.flatten_size
            )));
        }
        if self.out != 4 && self.out != FLAT_LEN {
            return Err(Error::Config(format!("head output must be 4 or {FLAT_LEN}")));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden layer must be non-empty".into()));
        }
        Ok(())
    }
}

/// Seeded parameter creation into a [`VarMap`].
struct ParamInit<'a> {
    map: &'a VarMap,
    rng: ChaCha8Rng,
    dtype: DType,
    device: &'a Device,
}

impl ParamInit<'_> {
    fn tensor(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.map.data().lock().expect("var map lock").insert(name.to_string(), var);
        Ok(out)
    }

    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.tensor(name, shape, values)
    }

    // Fan-in variance scaling for ReLU layers: std = sqrt(2 / fan_in).
    fn he_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let n = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let values = (0..n)
            .map(|_| {
                // Box-Muller.
                let u1: f64 = self.rng.random_range(f64::EPSILON..1.0);
                let u2: f64 = self.rng.random();
                std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        self.tensor(name, shape, values)
    }

    fn zeros(&mut self, name: &str, len: usize) -> Result<Tensor> {
        self.tensor(name, &[len], vec![0.0; len])
    }
}

struct Conv {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl Conv {
    fn new(init: &mut ParamInit, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(Self {
            weight: init.he_normal(&format!("{name}.weight"), &[cout, cin, k, k], cin * k * k)?,
            bias: init.zeros(&format!("{name}.bias"), cout)?,
            padding: k / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

struct UpConv {
    weight: Tensor,
    bias: Tensor,
}

impl UpConv {
    fn new(init: &mut ParamInit, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: init.he_normal(&format!("{name}.weight"), &[cin, cout, 2, 2], cin)?,
            bias: init.zeros(&format!("{name}.bias"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = kernels::upconv2x2(x, &self.weight)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Two 3x3 stride-1 convolutions, each followed by ReLU.
struct DoubleConv(Conv, Conv);

impl DoubleConv {
    fn new(init: &mut ParamInit, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self(
            Conv::new(init, &format!("{name}.conv1"), cin, cout, 3)?,
            Conv::new(init, &format!("{name}.conv2"), cout, cout, 3)?,
        ))
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = kernels::conv3x3_bias_relu(x, &self.0.weight, &self.0.bias)?;
        Ok(kernels::conv3x3_bias_relu(&x, &self.1.weight, &self.1.bias)?)
    }
}

pub struct UNet {
    pub config: UNetConfig,
    vars: VarMap,
    down: Vec<DoubleConv>,
    bottom: DoubleConv,
    up: Vec<(UpConv, DoubleConv)>,
    out: Conv,
    dtype: DType,
    device: Device,
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let vars = VarMap::new();
        let mut init = ParamInit {
            map: &vars,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: &device,
        };
        let mut down = Vec::with_capacity(config.levels);
        let mut cin = 1;
        for level in 0..config.levels {
            let c = config.channels(level);
            down.push(DoubleConv::new(&mut init, &format!("down{level}"), cin, c)?);
            cin = c;
        }
        let bottom = DoubleConv::new(&mut init, "bottom", cin, config.channels(config.levels))?;
        let mut up = Vec::with_capacity(config.levels);
        for level in (0..config.levels).rev() {
            let c = config.channels(level);
            up.push((
                UpConv::new(&mut init, &format!("up{level}.deconv"), 2 * c, c)?,
                DoubleConv::new(&mut init, &format!("up{level}"), 2 * c, c)?,
            ));
        }
        let out = Conv::new(&mut init, "out", config.base_channels, 1, 1)?;
        Ok(Self {
            config,
            vars,
            down,
            bottom,
            up,
            out,
            dtype,
            device,
        })
    }

    /// `(N, 1, S, S)` images to `(N, 1, S, S)` maps in `(0,1)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.config.input_size;
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != (1, s, s) {
            return Err(Error::InvalidImage(format!(
                "U-Net expects 1x{s}x{s} input, got {c}x{h}x{w}"
            )));
        }
        let mut skips = Vec::with_capacity(self.down.len());
        let mut x = x.clone();
        for block in &self.down {
            let f = block.forward(&x)?;
            x = kernels::max_pool2(&f)?;
            skips.push(f);
        }
        x = self.bottom.forward(&x)?;
        for ((deconv, block), skip) in self.up.iter().zip(skips.iter().rev()) {
            let upsampled = deconv.forward(&x)?;
            x = block.forward(&Tensor::cat(&[skip, &upsampled], 1)?)?;
        }
        Ok(candle_nn::ops::sigmoid(&self.out.forward(&x)?)?)
    }

    pub fn vars(&self) -> &VarMap {
        &self.vars
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.vars)
    }

    pub fn digest(&self) -> Result<String> {
        digest(&self.vars)
    }
}

/// Hidden layer then output layer, sigmoid after both.
pub struct Head {
    pub config: HeadConfig,
    vars: VarMap,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Head {
    pub fn new(config: HeadConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let vars = VarMap::new();
        let mut init = ParamInit {
            map: &vars,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: &device,
        };
        let b_in = 1.0 / (config.flatten_size as f64).sqrt();
        let b_hid = 1.0 / (config.hidden as f64).sqrt();
        let w1 = init.uniform("fc1.weight", &[config.hidden, config.flatten_size], b_in)?;
        let b1 = init.uniform("fc1.bias", &[config.hidden], b_in)?;
        let w2 = init.uniform("fc2.weight", &[config.out, config.hidden], b_hid)?;
        let b2 = init.uniform("fc2.bias", &[config.out], b_hid)?;
        Ok(Self {
            config,
            vars,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// `(N, flatten_size)` features to `(N, out)` values in `(0,1)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, n) = x.dims2()?;
        if n != self.config.flatten_size {
            return Err(Error::Config(format!(
                "head expects {} features, got {n}",
                self.config.flatten_size
            )));
        }
        let h = x.matmul(&self.w1.t()?)?.broadcast_add(&self.b1)?;
        let h = candle_nn::ops::sigmoid(&h)?;
        let y = h.matmul(&self.w2.t()?)?.broadcast_add(&self.b2)?;
        Ok(candle_nn::ops::sigmoid(&y)?)
    }

    pub fn vars(&self) -> &VarMap {
        &self.vars
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.vars)
    }
}

/// Builds a `(N, 1, S, S)` tensor from single-channel square images.
pub fn images_to_tensor(images: &[&FaceImage], dtype: DType) -> Result<Tensor> {
    let s = INPUT_SIZE;
    let mut data = Vec::with_capacity(images.len() * s * s);
    for img in images {
        let r = &img.raster;
        if (r.width, r.height, r.channels) != (s, s, 1) {
            return Err(Error::InvalidImage(format!(
                "network input must be {s}x{s}x1, got {}x{}x{}",
                r.width, r.height, r.channels
            )));
        }
        data.extend_from_slice(&r.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, s, s), &Device::Cpu)?.to_dtype(dtype)?)
}

/// U-Net plus head.
pub struct StackedModel {
    pub kind: HeadKind,
    pub unet: UNet,
    pub head: Head,
}

impl StackedModel {
    pub fn new(kind: HeadKind, unet: UNetConfig, hidden: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut head_cfg = HeadConfig::new(kind);
        head_cfg.hidden = hidden;
        head_cfg.flatten_size = unet.input_size * unet.input_size;
        Ok(Self {
            kind,
            unet: UNet::new(unet, seed, dtype)?,
            head: Head::new(head_cfg, seed.wrapping_add(1), dtype)?,
        })
    }

    /// U-Net maps flattened to `(N, S*S)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.unet.forward(x)?.flatten_from(1)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.features(x)?)
    }

    /// Raw head outputs per image, as f64.
    pub fn predict_raw(&self, images: &[&FaceImage]) -> Result<Vec<Vec<f64>>> {
        let x = images_to_tensor(images, self.unet.dtype())?;
        let y = self.forward(&x)?.to_dtype(DType::F64)?;
        Ok(y.to_vec2::<f64>()?)
    }

    pub fn parameter_count(&self) -> usize {
        self.unet.parameter_count() + self.head.parameter_count()
    }
}

/// Auxiliary model: image to face box.
pub fn forward_boundary(model: &StackedModel, img: &FaceImage) -> Result<BoundaryBox> {
    expect_kind(model, HeadKind::Boundary)?;
    let out = model.predict_raw(&[img])?;
    BoundaryBox::from_slice(&out[0])
}

/// Main model: image to landmarks.
pub fn forward_landmarks(model: &StackedModel, img: &FaceImage) -> Result<LandmarkSet> {
    expect_kind(model, HeadKind::Landmarks)?;
    let out = model.predict_raw(&[img])?;
    LandmarkSet::unflatten(&out[0])
}

fn expect_kind(model: &StackedModel, kind: HeadKind) -> Result<()> {
    if model.kind != kind {
        return Err(Error::Config(format!(
            "expected a {} model, got {}",
            kind.as_str(),
            model.kind.as_str()
        )));
    }
    Ok(())
}

pub fn parameter_count(vars: &VarMap) -> usize {
    vars.all_vars().iter().map(|v| v.elem_count()).sum()
}

/// SHA-256 over parameter names, shapes and values (as f64, little endian),
/// in name order.
pub fn digest(vars: &VarMap) -> Result<String> {
    let data = vars.data().lock().expect("var map lock");
    let sorted: BTreeMap<_, _> = data.iter().collect();
    let mut h = Sha256::new();
    for (name, var) in sorted {
        h.update(name.as_bytes());
        for d in var.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for v in values {
            h.update(v.to_le_bytes());
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

/// JSON sidecar written next to the parameter archives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: HeadKind,
    pub unet: UNetConfig,
    pub head: HeadConfig,
    pub parameter_count: usize,
    pub stage: u8,
    pub fold: Option<usize>,
    pub epoch: usize,
    pub seed: u64,
    pub git_rev: Option<String>,
    pub unet_digest: String,
}

pub const UNET_FILE: &str = "unet.safetensors";
pub const HEAD_FILE: &str = "head.safetensors";
pub const META_FILE: &str = "meta.json";

pub fn save_checkpoint(dir: &Path, model: &StackedModel, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.unet.vars.save(dir.join(UNET_FILE))?;
    model.head.vars.save(dir.join(HEAD_FILE))?;
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(dir.join(META_FILE), json).map_err(|e| Error::io(dir.join(META_FILE), e))
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a checkpoint. Without a stage-2 head archive the head keeps its
/// seeded initialization.
pub fn load_checkpoint(dir: &Path) -> Result<(StackedModel, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let mut model = StackedModel::new(meta.kind, meta.unet, meta.head.hidden, meta.seed, DType::F32)?;
    model.unet.vars.load(dir.join(UNET_FILE))?;
    let head = dir.join(HEAD_FILE);
    if head.exists() {
        model.head.vars.load(head)?;
    }
    Ok((model, meta))
}
