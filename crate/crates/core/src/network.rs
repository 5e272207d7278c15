//! Diff-VNet: one shared four-stage volumetric encoder with two input stems
//! and three structurally identical V-Net decoders.
//!
//! Level `i` of the feature pyramid has `F * 2^i` channels at `1 / 2^i` of
//! the input resolution. The denoising flow enters through a `K + 1` channel
//! stem (noisy label concatenated with the image) and adds a learned
//! projection of the timestep embedding after every stage; the plain flow
//! enters through a single-channel stem.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use adseg_autograd::{ConvGeometry, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffusion::timestep_embed;
use crate::types::Dims;
use crate::{Error, Result};

pub const LEVELS: usize = 5;
const SAME: ConvGeometry = ConvGeometry { kernel: 3, stride: 1, pad: 1 };
const DOWN: ConvGeometry = ConvGeometry { kernel: 2, stride: 2, pad: 0 };
const POINT: ConvGeometry = ConvGeometry { kernel: 1, stride: 1, pad: 0 };

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub num_classes: usize,
    pub feature_size: usize,
    pub emb_dim: usize,
    pub groups: usize,
    pub leak: f64,
}

impl NetConfig {
    pub fn new(num_classes: usize, feature_size: usize) -> Self {
        Self {
            num_classes,
            feature_size,
            emb_dim: 32,
            groups: 4,
            leak: 0.01,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.feature_size << level
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("network needs at least two classes".into()));
        }
        if self.feature_size == 0 || self.feature_size % self.groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "feature size {} must be a positive multiple of the {} norm groups",
                self.feature_size, self.groups
            )));
        }
        if self.emb_dim == 0 || self.emb_dim % 2 != 0 {
            return Err(Error::InvalidArgument("embedding dim must be even".into()));
        }
        Ok(())
    }
}

/// Spatial extents must survive four 2x down-samplings.
pub fn check_patch(dims: Dims) -> Result<()> {
    if dims.iter().any(|&d| d == 0 || d % 16 != 0) {
        return Err(Error::Shape(format!("patch {dims:?} must be divisible by 16 on every axis")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderStage {
    /// `None` at level 0, where the stem plays this role.
    down: Option<Conv>,
    entry_norm: Norm,
    block: Conv,
    block_norm: Norm,
    time_proj: Lin,
}

#[derive(Debug, Clone)]
struct Encoder {
    stem_denoise: Conv,
    stem_plain: Conv,
    time_mlp: Lin,
    stages: Vec<EncoderStage>,
}

#[derive(Debug, Clone)]
struct UpStage {
    up: Conv,
    up_norm: Norm,
    block: Conv,
    block_norm: Norm,
}

#[derive(Debug, Clone)]
struct Decoder {
    /// `ups[j]` maps level `j + 1` to level `j`.
    ups: Vec<UpStage>,
    head: Conv,
}

impl Decoder {
    fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in &self.ups {
            ids.extend([s.up.w, s.up.b, s.up_norm.gamma, s.up_norm.beta]);
            ids.extend([s.block.w, s.block.b, s.block_norm.gamma, s.block_norm.beta]);
        }
        ids.extend([self.head.w, self.head.b]);
        ids
    }
}

/// Which of the three decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecoderRole {
    /// Denoising decoder, trained with noisy labels.
    Xi,
    /// Difficulty-aware decoder, trained with re-weighted supervision.
    Psi,
    /// Predictor, trained only with pseudo labels.
    Theta,
}

impl DecoderRole {
    pub const ALL: [DecoderRole; 3] = [DecoderRole::Xi, DecoderRole::Psi, DecoderRole::Theta];

    fn index(self) -> usize {
        match self {
            DecoderRole::Xi => 0,
            DecoderRole::Psi => 1,
            DecoderRole::Theta => 2,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            DecoderRole::Xi => "dec_xi",
            DecoderRole::Psi => "dec_psi",
            DecoderRole::Theta => "dec_theta",
        }
    }
}

/// Multi-scale encoder output recorded in a graph.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    pub fn shapes(&self, g: &Graph<'_>) -> Vec<Vec<usize>> {
        self.levels.iter().map(|&v| g.value(v).shape().to_vec()).collect()
    }
}

/// All parameters of the network plus their structural bookkeeping.
#[derive(Debug, Clone)]
pub struct DiffVNet {
    cfg: NetConfig,
    store: ParamStore,
    encoder: Encoder,
    decoders: [Decoder; 3],
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::new(shape, (0..n).map(|_| dist.sample(&mut self.rng)).collect()).expect("sized")
    }
}

fn conv(store: &mut ParamStore, init: &mut Init, name: &str, shape: [usize; 5], fan_in: usize) -> Result<Conv> {
    let std = (2.0 / fan_in as f64).sqrt();
    let bias_len = shape[0];
    Ok(Conv {
        w: store.register(format!("{name}.w"), init.normal(&shape, std))?,
        b: store.register(format!("{name}.b"), Tensor::zeros(&[bias_len]))?,
    })
}

fn norm(store: &mut ParamStore, name: &str, c: usize) -> Result<Norm> {
    Ok(Norm {
        gamma: store.register(format!("{name}.gamma"), Tensor::full(&[c], 1.0))?,
        beta: store.register(format!("{name}.beta"), Tensor::zeros(&[c]))?,
    })
}

fn lin(store: &mut ParamStore, init: &mut Init, name: &str, fin: usize, fout: usize) -> Result<Lin> {
    let std = (1.0 / fin as f64).sqrt();
    Ok(Lin {
        w: store.register(format!("{name}.w"), init.normal(&[fout, fin], std))?,
        b: store.register(format!("{name}.b"), Tensor::zeros(&[fout]))?,
    })
}

impl DiffVNet {
    /// Builds the network with seeded initialization. The three decoders
    /// start from identical weights.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let f = cfg.feature_size;
        let k = cfg.num_classes;
        let hidden = 4 * f;
        let stem_denoise = conv(&mut store, &mut init, "enc.stem_denoise", [f, k + 1, 3, 3, 3], (k + 1) * 27)?;
        let stem_plain = conv(&mut store, &mut init, "enc.stem_plain", [f, 1, 3, 3, 3], 27)?;
        let time_mlp = lin(&mut store, &mut init, "enc.time_mlp", cfg.emb_dim, hidden)?;
        let mut stages = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            let c = cfg.channels(i);
            let down = if i == 0 {
                None
            } else {
                let cin = cfg.channels(i - 1);
                Some(conv(&mut store, &mut init, &format!("enc.stage{i}.down"), [c, cin, 2, 2, 2], cin * 8)?)
            };
            stages.push(EncoderStage {
                down,
                entry_norm: norm(&mut store, &format!("enc.stage{i}.entry_norm"), c)?,
                block: conv(&mut store, &mut init, &format!("enc.stage{i}.block"), [c, c, 3, 3, 3], c * 27)?,
                block_norm: norm(&mut store, &format!("enc.stage{i}.block_norm"), c)?,
                time_proj: lin(&mut store, &mut init, &format!("enc.stage{i}.time_proj"), hidden, c)?,
            });
        }
        let encoder = Encoder {
            stem_denoise,
            stem_plain,
            time_mlp,
            stages,
        };

        // one weight draw shared by all three decoders
        let mut template = Vec::new();
        for j in 0..LEVELS - 1 {
            let (cin, cout) = (cfg.channels(j + 1), cfg.channels(j));
            template.push((
                format!("up{j}.up"),
                init.normal(&[cin, cout, 2, 2, 2], (2.0 / cin as f64).sqrt()),
                init.normal(&[cout, cout, 3, 3, 3], (2.0 / (cout * 27) as f64).sqrt()),
            ));
        }
        let head_w = init.normal(&[k, f, 1, 1, 1], (1.0 / f as f64).sqrt());
        let mut build_decoder = |role: DecoderRole| -> Result<Decoder> {
            let p = role.prefix();
            let mut ups = Vec::with_capacity(LEVELS - 1);
            for (j, (_, up_w, block_w)) in template.iter().enumerate() {
                let cout = cfg.channels(j);
                let up = Conv {
                    w: store.register(format!("{p}.up{j}.up.w"), up_w.clone())?,
                    b: store.register(format!("{p}.up{j}.up.b"), Tensor::zeros(&[cout]))?,
                };
                let up_norm = norm(&mut store, &format!("{p}.up{j}.up_norm"), cout)?;
                let block = Conv {
                    w: store.register(format!("{p}.up{j}.block.w"), block_w.clone())?,
                    b: store.register(format!("{p}.up{j}.block.b"), Tensor::zeros(&[cout]))?,
                };
                let block_norm = norm(&mut store, &format!("{p}.up{j}.block_norm"), cout)?;
                ups.push(UpStage {
                    up,
                    up_norm,
                    block,
                    block_norm,
                });
            }
            let head = Conv {
                w: store.register(format!("{p}.head.w"), head_w.clone())?,
                b: store.register(format!("{p}.head.b"), Tensor::zeros(&[k]))?,
            };
            Ok(Decoder { ups, head })
        };
        let decoders = [
            build_decoder(DecoderRole::Xi)?,
            build_decoder(DecoderRole::Psi)?,
            build_decoder(DecoderRole::Theta)?,
        ];
        Ok(Self {
            cfg,
            store,
            encoder,
            decoders,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn decoder_ids(&self, role: DecoderRole) -> Vec<ParamId> {
        self.decoders[role.index()].ids()
    }

    /// Parameters shared by every flow (everything in the encoder except the
    /// two stems and the timestep projections).
    pub fn trunk_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in &self.encoder.stages {
            if let Some(d) = s.down {
                ids.extend([d.w, d.b]);
            }
            ids.extend([s.entry_norm.gamma, s.entry_norm.beta]);
            ids.extend([s.block.w, s.block.b, s.block_norm.gamma, s.block_norm.beta]);
        }
        ids
    }

    pub fn stem_ids(&self, denoising: bool) -> Vec<ParamId> {
        let s = if denoising {
            self.encoder.stem_denoise
        } else {
            self.encoder.stem_plain
        };
        vec![s.w, s.b]
    }

    fn conv(&self, g: &mut Graph<'_>, x: Var, c: Conv, geom: ConvGeometry) -> Result<Var> {
        let (w, b) = (g.param(c.w), g.param(c.b));
        Ok(g.conv3d(x, w, b, geom)?)
    }

    fn norm_act(&self, g: &mut Graph<'_>, x: Var, n: Norm) -> Result<Var> {
        let (gamma, beta) = (g.param(n.gamma), g.param(n.beta));
        let y = g.group_norm(x, gamma, beta, self.cfg.groups)?;
        Ok(g.leaky_relu(y, self.cfg.leak))
    }

    fn trunk(&self, g: &mut Graph<'_>, stem_out: Var, time: Option<Var>) -> Result<FeaturePyramid> {
        let mut levels = Vec::with_capacity(LEVELS);
        let mut prev = stem_out;
        for stage in &self.encoder.stages {
            let entry = match stage.down {
                Some(d) => self.conv(g, prev, d, DOWN)?,
                None => prev,
            };
            let a = self.norm_act(g, entry, stage.entry_norm)?;
            let b = self.conv(g, a, stage.block, SAME)?;
            let b = self.norm_act(g, b, stage.block_norm)?;
            let mut h = g.add(b, a)?;
            if let Some(e) = time {
                let (w, bias) = (g.param(stage.time_proj.w), g.param(stage.time_proj.b));
                let proj = g.linear(e, w, bias)?;
                h = g.add_channel(h, proj)?;
            }
            levels.push(h);
            prev = h;
        }
        Ok(FeaturePyramid { levels })
    }

    fn check_input(&self, x: &Tensor, channels: usize) -> Result<()> {
        let s = x.shape();
        if s.len() != 5 || s[1] != channels {
            return Err(Error::Shape(format!("encoder input {s:?}, expected [N, {channels}, D, H, W]")));
        }
        check_patch([s[2], s[3], s[4]])
    }

    /// Denoising flow: `concat([y_t, x])` plus per-sample timesteps.
    pub fn encode_denoising(&self, g: &mut Graph<'_>, x: &Tensor, y_t: &Tensor, t: &[usize]) -> Result<FeaturePyramid> {
        self.check_input(x, 1)?;
        self.check_input(y_t, self.cfg.num_classes)?;
        if x.shape()[0] != y_t.shape()[0] || x.shape()[2..] != y_t.shape()[2..] || t.len() != x.shape()[0] {
            return Err(Error::Shape(format!(
                "image {:?}, noisy label {:?}, {} timesteps",
                x.shape(),
                y_t.shape(),
                t.len()
            )));
        }
        let input = Tensor::concat_channels(&[y_t, x])?;
        let xi = g.input(input);
        let stem = self.conv(g, xi, self.encoder.stem_denoise, SAME)?;
        let mut emb = Vec::with_capacity(t.len() * self.cfg.emb_dim);
        for &ti in t {
            emb.extend(timestep_embed(ti, self.cfg.emb_dim)?.values);
        }
        let e = g.input(Tensor::new(&[t.len(), self.cfg.emb_dim], emb)?);
        let (w, b) = (g.param(self.encoder.time_mlp.w), g.param(self.encoder.time_mlp.b));
        let hidden = g.linear(e, w, b)?;
        let hidden = g.leaky_relu(hidden, self.cfg.leak);
        self.trunk(g, stem, Some(hidden))
    }

    /// Image-only flow sharing the trunk with the denoising flow.
    pub fn encode_plain(&self, g: &mut Graph<'_>, x: &Tensor) -> Result<FeaturePyramid> {
        self.check_input(x, 1)?;
        let xi = g.input(x.clone());
        let stem = self.conv(g, xi, self.encoder.stem_plain, SAME)?;
        self.trunk(g, stem, None)
    }

    /// Decodes a pyramid into `[N, K, D, H, W]` logits.
    pub fn decode(&self, g: &mut Graph<'_>, role: DecoderRole, h: &FeaturePyramid) -> Result<Var> {
        if h.levels.len() != LEVELS {
            return Err(Error::Shape(format!("pyramid has {} levels", h.levels.len())));
        }
        for (i, &v) in h.levels.iter().enumerate() {
            let c = g.value(v).shape()[1];
            if c != self.cfg.channels(i) {
                return Err(Error::Shape(format!(
                    "pyramid level {i} has {c} channels, decoder expects {}",
                    self.cfg.channels(i)
                )));
            }
        }
        let dec = &self.decoders[role.index()];
        let mut u = h.levels[LEVELS - 1];
        for j in (0..LEVELS - 1).rev() {
            let s = &dec.ups[j];
            let (w, b) = (g.param(s.up.w), g.param(s.up.b));
            let up = g.upconv2(u, w, b)?;
            let up = self.norm_act(g, up, s.up_norm)?;
            let skip = g.add(up, h.levels[j])?;
            let c = self.conv(g, skip, s.block, SAME)?;
            let c = self.norm_act(g, c, s.block_norm)?;
            u = g.add(c, skip)?;
        }
        self.conv(g, u, dec.head, POINT)
    }

    /// Forward-only logits of the denoising flow.
    pub fn denoise_logits(&self, x: &Tensor, y_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let h = self.encode_denoising(&mut g, x, y_t, t)?;
        let out = self.decode(&mut g, DecoderRole::Xi, &h)?;
        Ok(g.value(out).clone())
    }

    /// Forward-only logits of the image-only flow through `role`.
    pub fn plain_logits(&self, role: DecoderRole, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let h = self.encode_plain(&mut g, x)?;
        let out = self.decode(&mut g, role, &h)?;
        Ok(g.value(out).clone())
    }

    /// `theta <- w * theta + (1 - w) * (xi + psi) / 2`, elementwise.
    pub fn ema_distill(&mut self, w_ema: f64) -> Result<()> {
        let xi = self.decoder_ids(DecoderRole::Xi);
        let psi = self.decoder_ids(DecoderRole::Psi);
        let theta = self.decoder_ids(DecoderRole::Theta);
        ema_update(&mut self.store, &xi, &psi, &theta, w_ema)
    }

    pub fn save(&self, dir: &Path, config_echo: &str) -> Result<()> {
        save_checkpoint(dir, &self.cfg, &self.store, config_echo)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = read_net_config(dir)?;
        let mut net = DiffVNet::new(cfg, 0)?;
        load_params(dir, &mut net.store)?;
        Ok(net)
    }

    pub fn set_params(&mut self, store: ParamStore) -> Result<()> {
        for (id, name, t) in store.iter() {
            if self.store.name(id) != name || self.store.get(id).shape() != t.shape() {
                return Err(Error::Shape(format!("parameter layout mismatch at {name}")));
            }
        }
        if store.len() != self.store.len() {
            return Err(Error::Shape("parameter count mismatch".into()));
        }
        self.store = store;
        Ok(())
    }
}

/// Elementwise EMA of `theta` toward the mean of `xi` and `psi`.
pub fn ema_update(store: &mut ParamStore, xi: &[ParamId], psi: &[ParamId], theta: &[ParamId], w_ema: f64) -> Result<()> {
    if xi.len() != psi.len() || xi.len() != theta.len() {
        return Err(Error::Shape("decoder layouts differ in length".into()));
    }
    for ((&a, &b), &c) in xi.iter().zip(psi).zip(theta) {
        let (sa, sb, sc) = (store.get(a).shape(), store.get(b).shape(), store.get(c).shape());
        if sa != sb || sa != sc {
            return Err(Error::Shape(format!(
                "decoder tensors {} / {} / {} have different shapes",
                store.name(a),
                store.name(b),
                store.name(c)
            )));
        }
        let mean: Vec<f64> = store
            .get(a)
            .data()
            .iter()
            .zip(store.get(b).data())
            .map(|(x, y)| (x + y) / 2.0)
            .collect();
        for (t, m) in store.get_mut(c).data_mut().iter_mut().zip(mean) {
            *t = w_ema * *t + (1.0 - w_ema) * m;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints: `network.cfg`, `tensors.manifest` (name + shape per line) and
// `tensors.raw` (`A&D-RAWv1 N 1 1 0 1 1 1` header + little-endian f64 payload).

const NET_CFG: &str = "network.cfg";
const TENSOR_MANIFEST: &str = "tensors.manifest";
const TENSOR_DATA: &str = "tensors.raw";

fn save_checkpoint(dir: &Path, cfg: &NetConfig, store: &ParamStore, config_echo: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let net = format!(
        "num_classes={}\nfeature_size={}\nemb_dim={}\ngroups={}\nleak={}\n",
        cfg.num_classes, cfg.feature_size, cfg.emb_dim, cfg.groups, cfg.leak
    );
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write(NET_CFG, net.as_bytes())?;
    let mut manifest = String::new();
    let total = store.numel();
    let mut payload = format!("{} {total} 1 1 0 1 1 1\n", crate::data::RAW_MAGIC).into_bytes();
    for (_, name, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(manifest, "{name} {}", dims.join(" "));
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    write(TENSOR_MANIFEST, manifest.as_bytes())?;
    write(TENSOR_DATA, &payload)?;
    write("config.resolved", config_echo.as_bytes())
}

fn read_net_config(dir: &Path) -> Result<NetConfig> {
    let p = dir.join(NET_CFG);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut cfg = NetConfig::new(2, 8);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{}: bad line {line:?}", p.display())))?;
        let bad = || Error::Format(format!("{}: bad value for {k}", p.display()));
        match k {
            "num_classes" => cfg.num_classes = v.parse().map_err(|_| bad())?,
            "feature_size" => cfg.feature_size = v.parse().map_err(|_| bad())?,
            "emb_dim" => cfg.emb_dim = v.parse().map_err(|_| bad())?,
            "groups" => cfg.groups = v.parse().map_err(|_| bad())?,
            "leak" => cfg.leak = v.parse().map_err(|_| bad())?,
            _ => return Err(Error::Format(format!("{}: unknown key {k}", p.display()))),
        }
    }
    Ok(cfg)
}

fn load_params(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let mp = dir.join(TENSOR_MANIFEST);
    let manifest = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let dp = dir.join(TENSOR_DATA);
    let bytes = fs::read(&dp).map_err(|e| Error::io(&dp, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("{}: missing header", dp.display())))?;
    let head = std::str::from_utf8(&bytes[..nl]).unwrap_or("");
    if !head.starts_with(crate::data::RAW_MAGIC) {
        return Err(Error::Format(format!("{}: bad magic", dp.display())));
    }
    let mut values = bytes[nl + 1..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut seen = 0;
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or_default();
        let shape: Vec<usize> = parts
            .map(|s| s.parse().map_err(|_| Error::Format(format!("{}: bad shape for {name}", mp.display()))))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        if data.len() != n {
            return Err(Error::Format(format!("{}: truncated at {name}", dp.display())));
        }
        store.set_by_name(name, Tensor::new(&shape, data)?)?;
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {seen} tensors, network expects {}",
            store.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DiffVNet {
        DiffVNet::new(NetConfig::new(2, 4), 3).unwrap()
    }

    fn image(n: usize, side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let len = n * side * side * side;
        Tensor::new(&[n, 1, side, side, side], (0..len).map(|_| dist.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn plain_pyramid_follows_shape_law() {
        let net = tiny();
        let mut g = Graph::inference(net.store());
        let h = net.encode_plain(&mut g, &image(1, 16, 0)).unwrap();
        let shapes = h.shapes(&g);
        for (i, s) in shapes.iter().enumerate() {
            let side = 16 >> i;
            assert_eq!(s, &vec![1, 4 << i, side, side, side]);
        }
        let logits = net.decode(&mut g, DecoderRole::Theta, &h).unwrap();
        assert_eq!(g.value(logits).shape(), &[1, 2, 16, 16, 16]);
    }

    #[test]
    fn decoders_start_identical() {
        let net = tiny();
        let xi = net.decoder_ids(DecoderRole::Xi);
        let theta = net.decoder_ids(DecoderRole::Theta);
        for (a, b) in xi.iter().zip(&theta) {
            assert_eq!(net.store().get(*a), net.store().get(*b));
        }
    }

    #[test]
    fn ema_arithmetic() {
        let mut store = ParamStore::new();
        let xi = store.register("xi", Tensor::new(&[3], vec![0.0, 2.0, 1.5]).unwrap()).unwrap();
        let psi = store.register("psi", Tensor::new(&[3], vec![0.0, 0.0, 1.5]).unwrap()).unwrap();
        let th = store.register("th", Tensor::new(&[3], vec![1.0, 0.0, 1.5]).unwrap()).unwrap();
        ema_update(&mut store, &[xi], &[psi], &[th], 0.99).unwrap();
        let got = store.get(th).data();
        assert!((got[0] - 0.99).abs() < 1e-15);
        assert!((got[1] - 0.01).abs() < 1e-15);
        assert_eq!(got[2], 1.5);
        assert_eq!(store.get(xi).data(), &[0.0, 2.0, 1.5]);
        let bad = store.register("bad", Tensor::zeros(&[2])).unwrap();
        assert!(ema_update(&mut store, &[xi], &[psi], &[bad], 0.99).is_err());
    }

    #[test]
    fn patch_must_divide_by_sixteen() {
        assert!(check_patch([16, 32, 48]).is_ok());
        assert!(check_patch([16, 20, 16]).is_err());
        let net = tiny();
        let mut g = Graph::inference(net.store());
        let x = Tensor::zeros(&[1, 1, 8, 8, 8]);
        assert!(net.encode_plain(&mut g, &x).is_err());
    }
}
