//! Two-channel eye-region segmenter: a small U-Net trained with MSE
//! against binary eyeball/iris masks, then frozen to label real images.

use crate::augment::{apply_random, AugmentSpec};
use crate::checkpoint::Checkpoint;
use crate::datapipe::EyeSample;
use crate::error::{Error, Result};
use crate::nn::layers::{
    concat_channels, maxpool2, maxpool2_backward, mse, relu, relu_backward, sigmoid,
    sigmoid_backward, split_channels, upsample2, upsample2_backward,
};
use crate::nn::{Adam, Conv2d, ParamStore, Scalar};
use crate::rng::rng_for;
use crate::synth::MaskPair;
use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegmenterConfig {
    pub input_hw: (usize, usize),
    pub base_channels: usize,
    /// Downsampling stages; input dims must divide by 2^depth.
    pub depth: usize,
    pub out_channels: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Step LR decay: multiply by `lr_gamma` every `lr_step` epochs.
    pub lr_step: usize,
    pub lr_gamma: f64,
    /// Online input augmentation during training (masks untouched).
    pub augment_enabled: bool,
    pub augment: AugmentSpec,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            input_hw: (36, 60),
            base_channels: 32,
            depth: 2,
            out_channels: 2,
            epochs: 50,
            lr: 1e-5,
            batch_size: 32,
            lr_step: 5,
            lr_gamma: 0.1,
            augment_enabled: true,
            augment: AugmentSpec::default(),
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.depth;
        if self.input_hw.0 % div != 0 || self.input_hw.1 % div != 0 {
            return Err(Error::config(format!(
                "input {:?} not divisible by 2^{}",
                self.input_hw, self.depth
            )));
        }
        if self.base_channels == 0 || self.out_channels == 0 || self.batch_size == 0 {
            return Err(Error::config("zero-sized segmenter dimension"));
        }
        self.augment.validate()?;
        Ok(())
    }

    /// Step decay: `lr * gamma^(epoch / step)` with 0-based epochs.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi((epoch / self.lr_step) as i32)
    }
}

/// U-Net with one conv per stage and nearest-neighbour upsampling.
/// Encoder stage i output concatenates with decoder stage depth-1-i.
pub struct UNet<T: Scalar> {
    pub store: ParamStore<T>,
    pub cfg: SegmenterConfig,
    enc: Vec<Conv2d>,
    bottleneck: Conv2d,
    dec: Vec<Conv2d>,
    out: Conv2d,
}

pub struct UNetCache<T: Scalar> {
    enc_in: Vec<Array4<T>>,
    skips: Vec<Array4<T>>,
    pool_idx: Vec<Vec<u32>>,
    pool_shapes: Vec<(usize, usize, usize, usize)>,
    bott_in: Array4<T>,
    bott_out: Array4<T>,
    dec_in: Vec<Array4<T>>,
    dec_out: Vec<Array4<T>>,
    probs: Array4<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(cfg: &SegmenterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "segmenter-init", 0);
        let base = cfg.base_channels;
        let mut enc = Vec::new();
        let mut cin = 1usize;
        for i in 0..cfg.depth {
            let cout = base << i;
            enc.push(Conv2d::new(&mut store, &format!("enc{i}"), cin, cout, 3, &mut rng));
            cin = cout;
        }
        let bott_out_ch = base << cfg.depth;
        let bottleneck = Conv2d::new(&mut store, "bottleneck", cin, bott_out_ch, 3, &mut rng);
        let mut dec = Vec::new();
        let mut up_ch = bott_out_ch;
        for j in 0..cfg.depth {
            let skip_ch = base << (cfg.depth - 1 - j);
            let cout = skip_ch;
            dec.push(Conv2d::new(
                &mut store,
                &format!("dec{j}"),
                up_ch + skip_ch,
                cout,
                3,
                &mut rng,
            ));
            up_ch = cout;
        }
        let out = Conv2d::new(&mut store, "out", up_ch, cfg.out_channels, 1, &mut rng);
        Ok(UNet {
            store,
            cfg: cfg.clone(),
            enc,
            bottleneck,
            dec,
            out,
        })
    }

    pub fn forward_train(&self, x: &Array4<T>) -> (Array4<T>, UNetCache<T>) {
        let depth = self.cfg.depth;
        let mut enc_in = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        let mut pool_idx = Vec::with_capacity(depth);
        let mut pool_shapes = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for i in 0..depth {
            enc_in.push(cur.clone());
            let a = relu(&self.enc[i].forward(&self.store, &cur));
            pool_shapes.push(a.dim());
            let (p, idx) = maxpool2(&a);
            skips.push(a);
            pool_idx.push(idx);
            cur = p;
        }
        let bott_in = cur;
        let bott_out = relu(&self.bottleneck.forward(&self.store, &bott_in));
        let mut dec_in = Vec::with_capacity(depth);
        let mut dec_out = Vec::with_capacity(depth);
        let mut cur = bott_out.clone();
        for j in 0..depth {
            let up = upsample2(&cur);
            let cat = concat_channels(&up, &skips[depth - 1 - j]);
            let a = relu(&self.dec[j].forward(&self.store, &cat));
            dec_in.push(cat);
            dec_out.push(a.clone());
            cur = a;
        }
        let probs = sigmoid(&self.out.forward(&self.store, &cur));
        (
            probs.clone(),
            UNetCache {
                enc_in,
                skips,
                pool_idx,
                pool_shapes,
                bott_in,
                bott_out,
                dec_in,
                dec_out,
                probs,
            },
        )
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        self.forward_train(x).0
    }

    /// Accumulates parameter gradients; returns dX.
    pub fn backward(&mut self, cache: &UNetCache<T>, dprobs: &Array4<T>) -> Array4<T> {
        let depth = self.cfg.depth;
        let dz_out = sigmoid_backward(&cache.probs, dprobs);
        let out_in = if depth > 0 {
            &cache.dec_out[depth - 1]
        } else {
            &cache.bott_out
        };
        let mut dcur = self.out.backward(&mut self.store, out_in, &dz_out);
        let mut skip_grads: Vec<Option<Array4<T>>> = vec![None; depth];
        for j in (0..depth).rev() {
            let dz = relu_backward(&cache.dec_out[j], &dcur);
            let dcat = self.dec[j].backward(&mut self.store, &cache.dec_in[j], &dz);
            let up_ch = dcat.dim().1 - self.enc_channels(depth - 1 - j);
            let (dup, dskip) = split_channels(&dcat, up_ch);
            skip_grads[depth - 1 - j] = Some(dskip);
            dcur = upsample2_backward(&dup);
        }
        let dz = relu_backward(&cache.bott_out, &dcur);
        let mut dcur = self.bottleneck.backward(&mut self.store, &cache.bott_in, &dz);
        for i in (0..depth).rev() {
            let mut da = maxpool2_backward(cache.pool_shapes[i], &cache.pool_idx[i], &dcur);
            if let Some(sg) = &skip_grads[i] {
                da.zip_mut_with(sg, |a, &b| *a += b);
            }
            let dz = relu_backward(&cache.skips[i], &da);
            dcur = self.enc[i].backward(&mut self.store, &cache.enc_in[i], &dz);
        }
        dcur
    }

    fn enc_channels(&self, i: usize) -> usize {
        self.cfg.base_channels << i
    }

    /// Layer-output shapes for one input, for structure assertions.
    pub fn probe_shapes(&self, x: &Array4<T>) -> Vec<(String, Vec<usize>)> {
        let (_, cache) = self.forward_train(x);
        let mut v = Vec::new();
        for (i, s) in cache.skips.iter().enumerate() {
            v.push((format!("enc{i}"), s.shape().to_vec()));
        }
        v.push(("bottleneck".into(), cache.bott_out.shape().to_vec()));
        for (j, s) in cache.dec_in.iter().enumerate() {
            v.push((format!("dec{j}.concat"), s.shape().to_vec()));
        }
        for (j, s) in cache.dec_out.iter().enumerate() {
            v.push((format!("dec{j}"), s.shape().to_vec()));
        }
        v.push(("probs".into(), cache.probs.shape().to_vec()));
        v
    }
}

impl UNet<f32> {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "segmenter" {
            return Err(Error::Checkpoint(format!(
                "expected a segmenter checkpoint, got {}",
                ckpt.kind
            )));
        }
        let cfg: SegmenterConfig = serde_json::from_value(ckpt.header["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
        let mut model = UNet::new(&cfg, 0)?;
        ckpt.load_into_store(&mut model.store)?;
        Ok(model)
    }
}

/// Per-pixel sigmoid masks for one preprocessed image: `[2, H, W]`.
pub fn segment(model: &UNet<f32>, image: &Array2<f32>) -> Result<Array3<f32>> {
    let (h, w) = image.dim();
    let div = 1usize << model.cfg.depth;
    if h % div != 0 || w % div != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} not divisible by 2^{}",
            model.cfg.depth
        )));
    }
    let mut x = Array4::<f32>::zeros((1, 1, h, w));
    x.index_axis_mut(ndarray::Axis(0), 0)
        .index_axis_mut(ndarray::Axis(0), 0)
        .assign(image);
    let y = model.forward(&x);
    Ok(y.index_axis(ndarray::Axis(0), 0).to_owned())
}

/// Threshold soft masks and enforce iris containment by intersection.
pub fn binarize(soft: &Array3<f32>, threshold: f32) -> MaskPair {
    let eyeball = soft
        .index_axis(ndarray::Axis(0), 0)
        .mapv(|v| if v >= threshold { 1.0f32 } else { 0.0 });
    let iris_raw = soft.index_axis(ndarray::Axis(0), 1);
    let mut iris = Array2::<f32>::zeros(eyeball.dim());
    for ((y, x), v) in iris_raw.indexed_iter() {
        if *v >= threshold && eyeball[(y, x)] == 1.0 {
            iris[(y, x)] = 1.0;
        }
    }
    MaskPair { eyeball, iris }
}

/// Per-channel intersection-over-union; empty/empty counts as 1.0.
pub fn evaluate_iou(pred: &MaskPair, gt: &MaskPair) -> Result<(f64, f64)> {
    if pred.eyeball.dim() != gt.eyeball.dim() {
        return Err(Error::invalid("IoU shape mismatch"));
    }
    let channel = |p: &Array2<f32>, g: &Array2<f32>| -> f64 {
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&a, &b) in p.iter().zip(g.iter()) {
            let a = a >= 0.5;
            let b = b >= 0.5;
            inter += u64::from(a && b);
            union += u64::from(a || b);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    };
    Ok((
        channel(&pred.eyeball, &gt.eyeball),
        channel(&pred.iris, &gt.iris),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_iou: (f64, f64),
}

pub struct TrainedSegmenter {
    pub model: UNet<f32>,
    pub history: Vec<SegEpoch>,
    pub best_epoch: usize,
    pub best_val_iou: (f64, f64),
    pub epochs_trained: usize,
}

impl TrainedSegmenter {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            "segmenter",
            serde_json::json!({
                "config": self.model.cfg,
                "epochs_trained": self.epochs_trained,
                "best_epoch": self.best_epoch,
                "val_iou": [self.best_val_iou.0, self.best_val_iou.1],
            }),
            &self.model.store,
        )
    }
}

fn batch_tensor(samples: &[&EyeSample], images: &[Array2<f32>]) -> (Array4<f32>, Array4<f32>) {
    let n = samples.len();
    let (h, w) = images[0].dim();
    let mut x = Array4::<f32>::zeros((n, 1, h, w));
    let mut t = Array4::<f32>::zeros((n, 2, h, w));
    for (i, (s, img)) in samples.iter().zip(images).enumerate() {
        x.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(img);
        let masks = s.masks.as_ref().expect("checked by caller");
        t.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&masks.eyeball);
        t.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 1)
            .assign(&masks.iris);
    }
    (x, t)
}

/// Dataset-level IoU of the model on labeled samples.
pub fn dataset_iou(model: &UNet<f32>, samples: &[EyeSample], batch: usize) -> (f64, f64) {
    let mut inter = [0u64; 2];
    let mut union = [0u64; 2];
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&EyeSample> = chunk.iter().collect();
        let images: Vec<Array2<f32>> = chunk.iter().map(|s| s.image.clone()).collect();
        let (x, t) = batch_tensor(&refs, &images);
        let y = model.forward(&x);
        for i in 0..refs.len() {
            for c in 0..2 {
                let p = y.index_axis(ndarray::Axis(0), i);
                let pc = p.index_axis(ndarray::Axis(0), c);
                let tc = t
                    .index_axis(ndarray::Axis(0), i)
                    .index_axis(ndarray::Axis(0), c)
                    .to_owned();
                for (&pv, &tv) in pc.iter().zip(tc.iter()) {
                    let a = pv >= 0.5;
                    let b = tv >= 0.5;
                    inter[c] += u64::from(a && b);
                    union[c] += u64::from(a || b);
                }
            }
        }
    }
    let iou = |i: u64, u: u64| if u == 0 { 1.0 } else { i as f64 / u as f64 };
    (iou(inter[0], union[0]), iou(inter[1], union[1]))
}

/// Train on labeled samples; returns the best-validation-IoU weights.
pub fn train_segmenter(
    train: &[EyeSample],
    val: &[EyeSample],
    cfg: &SegmenterConfig,
    seed: u64,
) -> Result<TrainedSegmenter> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::precondition("empty training set"));
    }
    for (what, set) in [("train", train), ("val", val)] {
        if set.iter().any(|s| s.masks.is_none()) {
            return Err(Error::precondition(format!(
                "{what} manifest lacks ground-truth masks"
            )));
        }
    }
    let mut model = UNet::<f32>::new(cfg, seed)?;
    let mut adam = Adam::new();
    let frozen = HashSet::new();
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, (f64, f64), Vec<Vec<u8>>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_for(seed, "seg-shuffle", epoch as u64));
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&EyeSample> = chunk.iter().map(|&i| &train[i]).collect();
            let images: Vec<Array2<f32>> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment_enabled {
                        let mut rng =
                            rng_for(seed, "seg-aug", (epoch * n + i) as u64);
                        apply_random(&train[i].image, &cfg.augment, &mut rng)
                    } else {
                        train[i].image.clone()
                    }
                })
                .collect();
            let (x, t) = batch_tensor(&refs, &images);
            let (probs, cache) = model.forward_train(&x);
            let (loss, dprobs) = mse(&probs, &t);
            model.store.zero_grads();
            model.backward(&cache, &dprobs);
            adam.step(&mut model.store, lr, &frozen);
            epoch_loss += loss as f64;
            batches += 1;
        }
        let val_iou = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            dataset_iou(&model, val, cfg.batch_size)
        };
        history.push(SegEpoch {
            epoch,
            lr,
            train_mse: epoch_loss / batches.max(1) as f64,
            val_iou,
        });
        let score = if val.is_empty() {
            -(history.last().unwrap().train_mse)
        } else {
            (val_iou.0 + val_iou.1) / 2.0
        };
        let best_score = best.as_ref().map(|(e, iou, _)| {
            if val.is_empty() {
                -history[*e].train_mse
            } else {
                (iou.0 + iou.1) / 2.0
            }
        });
        if best_score.is_none_or(|b| score > b) {
            let weights = model
                .store
                .ids()
                .map(|id| model.store.value_bytes(id))
                .collect();
            best = Some((epoch, val_iou, weights));
        }
        log::info!(
            "seg epoch {epoch}: lr {lr:.2e} train_mse {:.5} val_iou {:?}",
            history.last().unwrap().train_mse,
            val_iou
        );
    }
    let (best_epoch, best_val_iou, weights) = best.expect("at least one epoch");
    // restore best weights
    for (id, bytes) in model.store.ids().collect::<Vec<_>>().into_iter().zip(weights) {
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        for (v, nv) in model.store.value_mut(id).iter_mut().zip(values) {
            *v = nv;
        }
    }
    Ok(TrainedSegmenter {
        model,
        history,
        best_epoch,
        best_val_iou,
        epochs_trained: cfg.epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DatasetSpec};
    use crate::datapipe::{load_manifest, load_samples};

    fn small_cfg() -> SegmenterConfig {
        SegmenterConfig {
            base_channels: 8,
            epochs: 2,
            lr: 1e-3,
            batch_size: 8,
            augment_enabled: false,
            ..Default::default()
        }
    }

    fn synth_samples(count: usize, seed: u64) -> Vec<EyeSample> {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            count,
            seed,
            subjects: 2,
            ..Default::default()
        };
        let manifest = generate_dataset(&spec, dir.path()).unwrap();
        let descs = load_manifest(&manifest).unwrap();
        load_samples(&descs).unwrap()
    }

    #[test]
    fn output_shape_and_range_contract() {
        let model = UNet::<f32>::new(&small_cfg(), 1).unwrap();
        let img = Array2::from_elem((36, 60), 0.5f32);
        let soft = segment(&model, &img).unwrap();
        assert_eq!(soft.dim(), (2, 36, 60));
        assert!(soft.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // determinism
        let again = segment(&model, &img).unwrap();
        assert_eq!(soft, again);
        // other sizes divisible by 4 work too
        let img2 = Array2::from_elem((16, 24), 0.3f32);
        assert_eq!(segment(&model, &img2).unwrap().dim(), (2, 16, 24));
        // non-divisible rejected
        let img3 = Array2::from_elem((35, 60), 0.3f32);
        assert!(segment(&model, &img3).is_err());
    }

    #[test]
    fn skip_connections_concat_encoder_features() {
        let cfg = small_cfg();
        let model = UNet::<f32>::new(&cfg, 1).unwrap();
        let x = Array4::<f32>::zeros((1, 1, 36, 60));
        let shapes: std::collections::HashMap<String, Vec<usize>> =
            model.probe_shapes(&x).into_iter().collect();
        // encoder stage i concatenates into decoder stage depth-1-i
        assert_eq!(shapes["enc0"], vec![1, 8, 36, 60]);
        assert_eq!(shapes["enc1"], vec![1, 16, 18, 30]);
        assert_eq!(shapes["bottleneck"], vec![1, 32, 9, 15]);
        assert_eq!(shapes["dec0.concat"], vec![1, 32 + 16, 18, 30]);
        assert_eq!(shapes["dec1.concat"], vec![1, 16 + 8, 36, 60]);
        assert_eq!(shapes["probs"], vec![1, 2, 36, 60]);
    }

    #[test]
    fn one_adam_step_decreases_batch_loss_at_paper_lr() {
        // strict decrease across 5 seeds at lr = 1e-5
        let samples = synth_samples(8, 3);
        for seed in 0..5u64 {
            let cfg = SegmenterConfig {
                base_channels: 8,
                augment_enabled: false,
                ..Default::default()
            };
            let mut model = UNet::<f32>::new(&cfg, seed).unwrap();
            let refs: Vec<&EyeSample> = samples.iter().collect();
            let images: Vec<Array2<f32>> = samples.iter().map(|s| s.image.clone()).collect();
            let (x, t) = batch_tensor(&refs, &images);
            let (probs, cache) = model.forward_train(&x);
            let (l0, dprobs) = mse(&probs, &t);
            model.store.zero_grads();
            model.backward(&cache, &dprobs);
            let mut adam = Adam::new();
            adam.step(&mut model.store, 1e-5, &HashSet::new());
            let (l1, _) = mse(&model.forward(&x), &t);
            assert!(l1 < l0, "seed {seed}: {l1} !< {l0}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_tiny_input() {
        // 4x8 input variant in f64
        let cfg = SegmenterConfig {
            input_hw: (4, 8),
            base_channels: 2,
            epochs: 1,
            ..Default::default()
        };
        let mut model = UNet::<f64>::new(&cfg, 7).unwrap();
        let x = Array4::from_shape_fn((2, 1, 4, 8), |(n, _, y, xx)| {
            ((n * 31 + y * 7 + xx) as f64 * 0.37).sin() * 0.4 + 0.5
        });
        let t = Array4::from_shape_fn((2, 2, 4, 8), |(n, c, y, xx)| {
            f64::from((n + c + y + xx) % 2 == 0)
        });
        let (probs, cache) = model.forward_train(&x);
        let (_, dprobs) = mse(&probs, &t);
        model.store.zero_grads();
        model.backward(&cache, &dprobs);
        let h = 1e-6;
        for (pname, picks) in [("enc0.w", vec![0usize, 5, 17]), ("dec1.w", vec![3, 20]), ("out.w", vec![0, 7])] {
            let id = model.store.id_by_name(pname).unwrap();
            let analytic = model.store.grad(id).clone();
            for flat in picks {
                let orig = model.store.value(id).as_slice().unwrap()[flat];
                model.store.value_mut(id).as_slice_mut().unwrap()[flat] = orig + h;
                let (p, _) = model.forward_train(&x);
                let (lp, _) = mse(&p, &t);
                model.store.value_mut(id).as_slice_mut().unwrap()[flat] = orig - h;
                let (p, _) = model.forward_train(&x);
                let (lm, _) = mse(&p, &t);
                model.store.value_mut(id).as_slice_mut().unwrap()[flat] = orig;
                let num = (lp - lm) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[flat];
                let rel = (num - an).abs() / num.abs().max(an.abs()).max(1e-10);
                assert!(rel < 1e-3, "{pname}[{flat}]: fd {num} vs analytic {an}");
            }
        }
    }

    #[test]
    fn two_epochs_reduce_training_mse() {
        let samples = synth_samples(40, 11);
        let (train, val) = samples.split_at(32);
        let cfg = SegmenterConfig {
            base_channels: 8,
            epochs: 2,
            lr: 1e-3,
            batch_size: 8,
            augment_enabled: false,
            ..Default::default()
        };
        let trained = train_segmenter(train, val, &cfg, 5).unwrap();
        assert!(trained.history[1].train_mse < trained.history[0].train_mse);
    }

    #[test]
    fn step_lr_schedule_decays_by_gamma_every_step() {
        let cfg = SegmenterConfig::default();
        assert!((cfg.lr_at_epoch(0) - 1e-5).abs() < 1e-18);
        assert!((cfg.lr_at_epoch(4) - 1e-5).abs() < 1e-18);
        assert!((cfg.lr_at_epoch(5) - 1e-6).abs() < 1e-19);
        assert!((cfg.lr_at_epoch(10) - 1e-7).abs() < 1e-20);
        assert!((cfg.lr_at_epoch(14) - 1e-7).abs() < 1e-20);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let val = synth_samples(4, 13);
        assert!(train_segmenter(&[], &val, &small_cfg(), 1).is_err());
    }

    #[test]
    fn samples_without_masks_rejected() {
        let mut samples = synth_samples(4, 17);
        samples[2].masks = None;
        let (train, val) = samples.split_at(3);
        assert!(train_segmenter(train, val, &small_cfg(), 1).is_err());
    }

    #[test]
    fn binarize_enforces_iris_containment() {
        let mut soft = Array3::<f32>::zeros((2, 4, 4));
        soft[(1, 0, 0)] = 0.9; // iris on, eyeball off -> zeroed
        soft[(0, 1, 1)] = 0.9;
        soft[(1, 1, 1)] = 0.9; // both on -> kept
        soft[(0, 2, 2)] = 0.4; // below threshold
        let masks = binarize(&soft, 0.5);
        assert_eq!(masks.iris[(0, 0)], 0.0);
        assert_eq!(masks.iris[(1, 1)], 1.0);
        assert_eq!(masks.eyeball[(2, 2)], 0.0);
        assert!(masks.containment_holds());
        // all-0.4 input -> all-zero masks
        let dull = Array3::<f32>::from_elem((2, 4, 4), 0.4);
        let m = binarize(&dull, 0.5);
        assert!(m.eyeball.iter().all(|&v| v == 0.0));
        assert!(m.iris.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn iou_anchors_and_half_overlap() {
        let mk = |f: &dyn Fn(usize, usize) -> f32| Array2::from_shape_fn((4, 8), |(y, x)| f(y, x));
        let full = MaskPair {
            eyeball: mk(&|_, _| 1.0),
            iris: mk(&|_, x| f32::from(x < 4)),
        };
        let (a, b) = evaluate_iou(&full, &full).unwrap();
        assert_eq!((a, b), (1.0, 1.0));
        // disjoint nonempty
        let left = MaskPair {
            eyeball: mk(&|_, x| f32::from(x < 4)),
            iris: mk(&|_, x| f32::from(x < 2)),
        };
        let right = MaskPair {
            eyeball: mk(&|_, x| f32::from(x >= 4)),
            iris: mk(&|_, x| f32::from(x >= 6)),
        };
        assert_eq!(evaluate_iou(&left, &right).unwrap(), (0.0, 0.0));
        // half-overlapping rectangles: pred columns 0..4, gt columns 2..6
        // intersection 2 cols, union 6 cols -> 1/3
        let pred = MaskPair {
            eyeball: mk(&|_, x| f32::from(x < 4)),
            iris: mk(&|_, x| f32::from(x < 4)),
        };
        let gt = MaskPair {
            eyeball: mk(&|_, x| f32::from((2..6).contains(&x))),
            iris: mk(&|_, x| f32::from((2..6).contains(&x))),
        };
        let (e, i) = evaluate_iou(&pred, &gt).unwrap();
        assert!((e - 1.0 / 3.0).abs() < 1e-12);
        assert!((i - 1.0 / 3.0).abs() < 1e-12);
        // empty/empty -> 1.0
        let empty = MaskPair {
            eyeball: mk(&|_, _| 0.0),
            iris: mk(&|_, _| 0.0),
        };
        assert_eq!(evaluate_iou(&empty, &empty).unwrap(), (1.0, 1.0));
        // shape mismatch
        let other = MaskPair {
            eyeball: Array2::zeros((3, 3)),
            iris: Array2::zeros((3, 3)),
        };
        assert!(evaluate_iou(&full, &other).is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_samples(12, 23);
        let (train, val) = samples.split_at(8);
        let trained = train_segmenter(train, val, &small_cfg(), 9).unwrap();
        let p = dir.path().join("seg.ckpt");
        trained.to_checkpoint().save(&p).unwrap();
        let loaded = UNet::from_checkpoint(&Checkpoint::load(&p).unwrap()).unwrap();
        let img = &samples[9].image;
        assert_eq!(
            segment(&trained.model, img).unwrap(),
            segment(&loaded, img).unwrap()
        );
        // double round trip byte-identical
        let p2 = dir.path().join("seg2.ckpt");
        Checkpoint::load(&p).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn overfit_32_samples_reaches_high_train_iou() {
        // 200 full-batch steps on 32 samples
        let samples = synth_samples(32, 31);
        let cfg = SegmenterConfig {
            base_channels: 16,
            epochs: 200,
            lr: 2e-3,
            batch_size: 32,
            lr_step: 1000,
            augment_enabled: false,
            ..Default::default()
        };
        let trained = train_segmenter(&samples, &[], &cfg, 3).unwrap();
        let (e, i) = dataset_iou(&trained.model, &samples, 32);
        assert!(e > 0.9 && i > 0.9, "train IoU ({e:.3}, {i:.3}) below 0.9");
    }
}
