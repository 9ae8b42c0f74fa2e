//! Trainable image↔feature codec.
//!
//! A small convolutional encoder (stride-2 twice, so features live at 1/4
//! resolution) supervises the splat features during joint training and
//! extracts style statistics; the mirrored decoder turns rendered feature
//! maps back into images. Both are trained once on reconstruction and then
//! frozen for everything downstream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fmap::{psnr, FeatureMap};
use crate::gradops::record_grad_op;
use crate::optim::AdamState;
use crate::scene::STD_FLOOR;

/// 3×3 convolution with reflection padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    /// Weights `out × in × 3 × 3`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new_seeded(in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_ch * 9) as f64;
        let std = (2.0 / fan_in).sqrt();
        // Initialized at checkpoint storage precision (f32) so frozen weights
        // survive a save/load round trip bit-exactly.
        let weight = (0..out_ch * in_ch * 9)
            .map(|_| {
                // Box-Muller.
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std) as f32
                    as f64
            })
            .collect();
        Self {
            in_ch,
            out_ch,
            stride,
            weight,
            bias: vec![0.0; out_ch],
        }
    }

    fn out_size(&self, n: usize) -> usize {
        (n - 1) / self.stride + 1
    }

    pub fn forward(&self, input: &FeatureMap) -> FeatureMap {
        let (h, w) = (input.height(), input.width());
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let mut out = FeatureMap::zeros(self.out_ch, oh, ow);
        let rows: Vec<Vec<f64>> = (0..self.out_ch)
            .into_par_iter()
            .map(|o| {
                let mut plane = vec![0.0; oh * ow];
                for i in 0..self.in_ch {
                    let wbase = (o * self.in_ch + i) * 9;
                    let kw = &self.weight[wbase..wbase + 9];
                    let in_plane = input.channel(i);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ky in 0..3 {
                                let sy = reflect(oy * self.stride + ky, h);
                                for kx in 0..3 {
                                    let sx = reflect(ox * self.stride + kx, w);
                                    acc += kw[ky * 3 + kx] * in_plane[sy * w + sx];
                                }
                            }
                            plane[oy * ow + ox] += acc;
                        }
                    }
                }
                for v in plane.iter_mut() {
                    *v += self.bias[o];
                }
                plane
            })
            .collect();
        for (o, plane) in rows.into_iter().enumerate() {
            out.channel_mut(o).copy_from_slice(&plane);
        }
        out
    }

    /// Returns gradient on the layer input; accumulates (d_weight, d_bias).
    pub fn backward(
        &self,
        input: &FeatureMap,
        d_out: &FeatureMap,
        d_weight: &mut [f64],
        d_bias: &mut [f64],
    ) -> FeatureMap {
        let (h, w) = (input.height(), input.width());
        let (oh, ow) = (d_out.height(), d_out.width());
        let mut d_in = FeatureMap::zeros(self.in_ch, h, w);
        for o in 0..self.out_ch {
            let dplane = d_out.channel(o);
            d_bias[o] += dplane.iter().sum::<f64>();
            for i in 0..self.in_ch {
                let wbase = (o * self.in_ch + i) * 9;
                let kw = &self.weight[wbase..wbase + 9];
                let in_plane = input.channel(i);
                let din_plane = d_in.channel_mut(i);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = dplane[oy * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for ky in 0..3 {
                            let sy = reflect(oy * self.stride + ky, h);
                            for kx in 0..3 {
                                let sx = reflect(ox * self.stride + kx, w);
                                d_weight[wbase + ky * 3 + kx] += g * in_plane[sy * w + sx];
                                din_plane[sy * w + sx] += g * kw[ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

/// Reflection index for pad-1 sampling: position `i` is the padded index,
/// source = i − 1.
#[inline]
fn reflect(i: usize, n: usize) -> usize {
    let s = i as isize - 1;
    if s < 0 {
        (-s) as usize
    } else if s as usize >= n {
        2 * n - 2 - s as usize
    } else {
        s as usize
    }
}

fn upsample2(input: &FeatureMap) -> FeatureMap {
    let (c, h, w) = (input.channels(), input.height(), input.width());
    FeatureMap::from_fn(c, h * 2, w * 2, |ch, y, x| input.get(ch, y / 2, x / 2))
}

fn upsample2_backward(d_out: &FeatureMap) -> FeatureMap {
    let (c, h2, w2) = (d_out.channels(), d_out.height(), d_out.width());
    let (h, w) = (h2 / 2, w2 / 2);
    let mut d_in = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                d_in.add(ch, y / 2, x / 2, d_out.get(ch, y, x));
            }
        }
    }
    d_in
}

fn relu(m: &FeatureMap) -> FeatureMap {
    m.map(|v| v.max(0.0))
}

fn sigmoid_map(m: &FeatureMap) -> FeatureMap {
    m.map(crate::scene::sigmoid)
}

/// Architecture description and init seed; the encoder output width equals
/// the scene feature dimension.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodecSpec {
    pub feature_dim: usize,
    /// Encoder downsample factor (two stride-2 convolutions).
    pub downsample: usize,
    /// Hidden widths of the two outer conv stages.
    pub widths: [usize; 2],
    pub seed: u64,
}

impl CodecSpec {
    pub fn desk_default(feature_dim: usize, seed: u64) -> Self {
        Self {
            feature_dim,
            downsample: 4,
            widths: [16, 32],
            seed,
        }
    }
}

/// Frozen-after-training encoder/decoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub spec: CodecSpec,
    /// conv(3→w0, s2) · relu · conv(w0→w1, s2) · relu · conv(w1→F, s1).
    pub enc: Vec<Conv2d>,
    /// conv(F→w1, s1) · relu · up2 · conv(w1→w0, s1) · relu · up2 ·
    /// conv(w0→3, s1) · sigmoid.
    pub dec: Vec<Conv2d>,
}

impl Codec {
    pub fn new_seeded(spec: CodecSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let [w0, w1] = spec.widths;
        let enc = vec![
            Conv2d::new_seeded(3, w0, 2, &mut rng),
            Conv2d::new_seeded(w0, w1, 2, &mut rng),
            Conv2d::new_seeded(w1, spec.feature_dim, 1, &mut rng),
        ];
        let dec = vec![
            Conv2d::new_seeded(spec.feature_dim, w1, 1, &mut rng),
            Conv2d::new_seeded(w1, w0, 1, &mut rng),
            Conv2d::new_seeded(w0, 3, 1, &mut rng),
        ];
        Self { spec, enc, dec }
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn downsample(&self) -> usize {
        self.spec.downsample
    }

    /// Deterministic image→feature forward pass.
    pub fn encode(&self, image: &FeatureMap) -> Result<FeatureMap> {
        let (f, _) = self.encode_cached(image)?;
        Ok(f)
    }

    fn encode_cached(&self, image: &FeatureMap) -> Result<(FeatureMap, Vec<FeatureMap>)> {
        if image.channels() != 3 {
            return Err(Error::Usage(format!(
                "encode expects 3 channels, got {}",
                image.channels()
            )));
        }
        let k = self.spec.downsample;
        if image.height() % k != 0 || image.width() % k != 0 {
            return Err(Error::Usage(format!(
                "image {}x{} not divisible by downsample {}",
                image.height(),
                image.width(),
                k
            )));
        }
        let mut cache = Vec::new();
        let a0 = self.enc[0].forward(image);
        let z0 = relu(&a0);
        let a1 = self.enc[1].forward(&z0);
        let z1 = relu(&a1);
        let f = self.enc[2].forward(&z1);
        cache.push(z0);
        cache.push(z1);
        Ok((f.with_downsample(k), cache))
    }

    /// Deterministic feature→image forward pass, output in [0, 1].
    pub fn decode(&self, features: &FeatureMap) -> Result<FeatureMap> {
        let (img, _) = self.decode_cached(features)?;
        Ok(img)
    }

    fn decode_cached(&self, features: &FeatureMap) -> Result<(FeatureMap, Vec<FeatureMap>)> {
        if features.channels() != self.spec.feature_dim {
            return Err(Error::Usage(format!(
                "decode expects {} channels, got {}",
                self.spec.feature_dim,
                features.channels()
            )));
        }
        let a0 = self.dec[0].forward(features);
        let z0 = relu(&a0);
        let u0 = upsample2(&z0);
        let a1 = self.dec[1].forward(&u0);
        let z1 = relu(&a1);
        let u1 = upsample2(&z1);
        let a2 = self.dec[2].forward(&u1);
        let img = sigmoid_map(&a2);
        Ok((img, vec![z0, u0, z1, u1, a2]))
    }

    /// SHA-256 over every parameter, for frozen-weights assertions.
    pub fn weights_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for layer in self.enc.iter().chain(&self.dec) {
            for v in layer.weight.iter().chain(&layer.bias) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Conv2d> {
        self.enc.iter().chain(self.dec.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.enc.iter_mut().chain(self.dec.iter_mut())
    }
}

/// Per-layer (d_weight, d_bias) in `enc ++ dec` order.
pub struct CodecGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl CodecGrads {
    fn zeros(codec: &Codec) -> Self {
        Self {
            layers: codec
                .layers()
                .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    fn add(&mut self, other: &Self) {
        for ((aw, ab), (bw, bb)) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in aw.iter_mut().zip(bw) {
                *x += y;
            }
            for (x, y) in ab.iter_mut().zip(bb) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for (w, b) in self.layers.iter_mut() {
            w.iter_mut().for_each(|v| *v *= s);
            b.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Gradients of a scalar loss with upstream `d_recon` on the reconstruction
/// `decode(encode(image))`.
pub fn reconstruction_grads(
    codec: &Codec,
    image: &FeatureMap,
    d_recon: &FeatureMap,
) -> Result<CodecGrads> {
    record_grad_op();
    let (features, enc_cache) = codec.encode_cached(image)?;
    let (_, dec_cache) = codec.decode_cached(&features)?;
    let mut grads = CodecGrads::zeros(codec);
    let d_features = decode_backward(codec, &features, &dec_cache, d_recon, &mut grads);
    encode_backward(codec, image, &enc_cache, &d_features, &mut grads);
    Ok(grads)
}

fn decode_backward(
    codec: &Codec,
    features: &FeatureMap,
    cache: &[FeatureMap],
    d_img: &FeatureMap,
    grads: &mut CodecGrads,
) -> FeatureMap {
    let [z0, u0, z1, u1, a2] = cache else {
        panic!("decode cache shape");
    };
    let off = codec.enc.len();
    // Sigmoid.
    let mut d_a2 = d_img.clone();
    for (g, &a) in d_a2.data_mut().iter_mut().zip(a2.data()) {
        let s = crate::scene::sigmoid(a);
        *g *= s * (1.0 - s);
    }
    let (dw, db) = &mut grads.layers[off + 2];
    let d_u1 = codec.dec[2].backward(u1, &d_a2, dw, db);
    let mut d_z1 = upsample2_backward(&d_u1);
    for (g, &z) in d_z1.data_mut().iter_mut().zip(z1.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    let (dw, db) = &mut grads.layers[off + 1];
    let d_u0 = codec.dec[1].backward(u0, &d_z1, dw, db);
    let mut d_z0 = upsample2_backward(&d_u0);
    for (g, &z) in d_z0.data_mut().iter_mut().zip(z0.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    let (dw, db) = &mut grads.layers[off];
    codec.dec[0].backward(features, &d_z0, dw, db)
}

fn encode_backward(
    codec: &Codec,
    image: &FeatureMap,
    cache: &[FeatureMap],
    d_features: &FeatureMap,
    grads: &mut CodecGrads,
) {
    let [z0, z1] = cache else {
        panic!("encode cache shape");
    };
    let (dw, db) = &mut grads.layers[2];
    let mut d_z1 = codec.enc[2].backward(z1, d_features, dw, db);
    for (g, &z) in d_z1.data_mut().iter_mut().zip(z1.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    let (dw, db) = &mut grads.layers[1];
    let mut d_z0 = codec.enc[1].backward(z0, &d_z1, dw, db);
    for (g, &z) in d_z0.data_mut().iter_mut().zip(z0.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    let (dw, db) = &mut grads.layers[0];
    let _ = codec.enc[0].backward(image, &d_z0, dw, db);
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodecTrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the corpus held out for the reconstruction report.
    pub holdout_fraction: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 2e-3,
            batch_size: 4,
            seed: 0,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CodecTrainReport {
    pub iterations: usize,
    pub final_train_l1: f64,
    /// PSNR of decode(encode(·)) on held-out frames (train frames when the
    /// corpus is too small to split).
    pub holdout_psnr: f64,
    pub holdout_count: usize,
}

/// Train encoder and decoder jointly on L1 reconstruction, then freeze.
pub fn train_codec(
    codec: &mut Codec,
    corpus: &[FeatureMap],
    cfg: &CodecTrainConfig,
) -> Result<CodecTrainReport> {
    if corpus.is_empty() {
        return Err(Error::Usage("codec training corpus is empty".into()));
    }
    let n_hold = ((corpus.len() as f64 * cfg.holdout_fraction) as usize).min(corpus.len() - 1);
    let holdout: Vec<usize> = (0..n_hold).map(|i| corpus.len() - 1 - i).collect();
    let train: Vec<usize> = (0..corpus.len() - n_hold).collect();

    let mut adam: Vec<(AdamState, AdamState)> = codec
        .layers()
        .map(|l| {
            (
                AdamState::new(l.weight.len(), 0.9, 0.999, 1e-8),
                AdamState::new(l.bias.len(), 0.9, 0.999, 1e-8),
            )
        })
        .collect();

    let mut last_l1 = f64::NAN;
    for iter in 0..cfg.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let batch: Vec<usize> = (0..cfg.batch_size.max(1))
            .map(|_| train[rng.gen_range(0..train.len())])
            .collect();

        let per_image: Vec<(f64, CodecGrads)> = batch
            .par_iter()
            .map(|&idx| {
                let img = &corpus[idx];
                let recon = codec
                    .decode(&codec.encode(img).expect("encode"))
                    .expect("decode");
                let n = img.data().len() as f64;
                let l1 = recon.mean_abs_diff(img).expect("shape");
                let mut d_recon = recon.clone();
                for (g, (&r, &t)) in d_recon
                    .data_mut()
                    .iter_mut()
                    .zip(recon.data().iter().zip(img.data()))
                {
                    *g = (r - t).signum() / n;
                }
                let grads = reconstruction_grads(codec, img, &d_recon).expect("grads");
                (l1, grads)
            })
            .collect();

        let mut total = CodecGrads::zeros(codec);
        let mut loss = 0.0;
        for (l1, g) in &per_image {
            loss += l1;
            total.add(g);
        }
        loss /= per_image.len() as f64;
        total.scale(1.0 / per_image.len() as f64);
        if !loss.is_finite() {
            return Err(Error::TrainingFailure(format!(
                "codec loss became non-finite at iteration {}",
                iter
            )));
        }
        last_l1 = loss;

        for (layer, ((aw, ab), (gw, gb))) in codec
            .layers_mut()
            .zip(adam.iter_mut().zip(total.layers.iter()))
        {
            aw.step(&mut layer.weight, gw, cfg.learning_rate);
            ab.step(&mut layer.bias, gb, cfg.learning_rate);
        }
    }

    // Freeze at checkpoint storage precision so a codec loaded back from
    // disk is bit-identical to the one used from memory.
    for layer in codec.layers_mut() {
        for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }

    let eval_set: &[usize] = if holdout.is_empty() { &train } else { &holdout };
    let mut psnr_sum = 0.0;
    for &idx in eval_set {
        let img = &corpus[idx];
        let recon = codec.decode(&codec.encode(img)?)?;
        psnr_sum += psnr(&recon, img)?;
    }
    Ok(CodecTrainReport {
        iterations: cfg.iterations,
        final_train_l1: last_l1,
        holdout_psnr: psnr_sum / eval_set.len() as f64,
        holdout_count: eval_set.len(),
    })
}

/// Mean squared difference of per-channel-normalized features; the channel
/// statistics are pooled over both maps so the distance is symmetric and
/// zero only on equal inputs.
pub fn feature_distance(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    feature_distance_impl(a, b, None)
}

/// Variant with per-position weights (e.g. a validity mask pooled to the
/// feature resolution).
pub fn feature_distance_weighted(a: &FeatureMap, b: &FeatureMap, w: &FeatureMap) -> Result<f64> {
    if w.channels() != 1 || w.height() != a.height() || w.width() != a.width() {
        return Err(Error::ShapeMismatch("weight map shape mismatch".into()));
    }
    feature_distance_impl(a, b, Some(w))
}

fn feature_distance_impl(a: &FeatureMap, b: &FeatureMap, wmap: Option<&FeatureMap>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "feature_distance shapes {}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    let hw = a.height() * a.width();
    let mut total = 0.0;
    let mut wsum_total = 0.0;
    for c in 0..a.channels() {
        let ca = a.channel(c);
        let cb = b.channel(c);
        // Pooled mean/std over both maps.
        let mean = (ca.iter().sum::<f64>() + cb.iter().sum::<f64>()) / (2.0 * hw as f64);
        let var = (ca.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            + cb.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
            / (2.0 * hw as f64);
        let std = var.sqrt().max(STD_FLOOR);
        let inv = 1.0 / std;
        match wmap {
            None => {
                for i in 0..hw {
                    let d = (ca[i] - cb[i]) * inv;
                    total += d * d;
                }
                wsum_total += hw as f64;
            }
            Some(w) => {
                let ws = w.channel(0);
                for i in 0..hw {
                    let d = (ca[i] - cb[i]) * inv;
                    total += ws[i] * d * d;
                }
                wsum_total += ws.iter().sum::<f64>();
            }
        }
    }
    if wsum_total <= 0.0 {
        return Err(Error::Usage("feature_distance weights sum to zero".into()));
    }
    Ok(total / wsum_total)
}
