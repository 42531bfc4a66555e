use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{augment_shift, check_mr, ct_from_unit, extract_sagittal_slices, Fold, MrNormalizer, SlicePair, MR_FILL};
use super::loss::{adversarial_loss, gan_losses, l1_loss, GanLosses};
use super::{adam_step, lr_schedule, GanLoss, OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, DiscTape, Discriminator, GenTape, Generator, LayerGrad, Real, Tensor};
use crate::phantom::SubjectData;
use crate::volume::{Unit, Volume3D, HU_MAX, HU_MIN};

pub const LOG_HEADER: &str = "epoch,g_loss,d_loss,l1_term,val_l1,lr";

/// Mean training losses of one epoch and the validation L1 after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub g_loss: f64,
    pub d_loss: f64,
    pub l1_term: f64,
    pub val_l1: f64,
    pub lr: f64,
}

impl EpochLog {
    fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            self.epoch, self.g_loss, self.d_loss, self.l1_term, self.val_l1, self.lr
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Lowest validation L1 seen (the untrained network when no epoch ran).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Validation L1 of the untrained network.
    pub initial_val_l1: f64,
    pub best_val_l1: f64,
    pub best_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for e in &self.log {
            out.push_str(&e.csv_line());
            out.push('\n');
        }
        out
    }

    /// `loss_log.csv`, `best.sctf` and `final.sctf` inside `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join("loss_log.csv");
        fs::write(&log, self.log_csv()).map_err(|e| Error::io(&log, e))?;
        self.best.save(&dir.join("best.sctf"))?;
        self.last.save(&dir.join("final.sctf"))
    }
}

/// Batches of `(subject, slice)` indices drawn from successive shuffles.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn next<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

struct Labeled {
    subject: usize,
    slice: SlicePair,
}

fn tissue_slices(ids: &[usize], data: &[SubjectData]) -> Result<Vec<Labeled>> {
    let mut out = Vec::new();
    for &id in ids {
        let s = data
            .get(id)
            .ok_or_else(|| Error::Config(format!("fold names subject {id}, only {} loaded", data.len())))?;
        for slice in extract_sagittal_slices(&s.mr, &s.ct)? {
            if slice.has_tissue() {
                out.push(Labeled { subject: id, slice });
            }
        }
    }
    Ok(out)
}

fn stack(items: &[&SlicePair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = (items[0].height, items[0].width);
    let mut mr = Vec::with_capacity(items.len() * 3 * h * w);
    let mut ct = Vec::with_capacity(items.len() * h * w);
    for s in items {
        mr.extend_from_slice(&s.mr);
        ct.extend_from_slice(&s.ct);
    }
    Ok((Tensor::from_vec([items.len(), 3, h, w], mr)?, Tensor::from_vec([items.len(), 1, h, w], ct)?))
}

fn scaled<T: Real>(t: &Tensor<T>, s: f64) -> Tensor<T> {
    let s = T::of(s);
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v *= s);
    out
}

/// Mean |G(mr) − ct| over all pixels of the slices, in normalized units.
fn validation_l1(g: &Generator<f32>, slices: &[&SlicePair], batch: usize) -> Result<f64> {
    if slices.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in slices.chunks(batch) {
        let (mr, ct) = stack(chunk)?;
        let out = g.forward(&mr)?;
        sum += out.data().iter().zip(ct.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>();
        count += ct.data().len();
    }
    Ok(sum / count as f64)
}

/// Generator gradients for one batch from an existing forward pass: the
/// adversarial term through the (fixed) discriminator plus `λ_l1` times the L1
/// term. Returns the gradients and the generator loss.
fn generator_step_grads<T: Real>(
    g: &Generator<T>,
    tape: &GenTape<T>,
    fake: &Tensor<T>,
    d: &Discriminator<T>,
    mr: &Tensor<T>,
    ct: &Tensor<T>,
    lambda_l1: f64,
    kind: GanLoss,
) -> Result<(Vec<LayerGrad<T>>, f64)> {
    let (logits, dtape) = d.forward_tape(&Tensor::concat_channels(mr, fake)?)?;
    let (adv, d_logits) = adversarial_loss(&logits, 1.0, kind);
    let (_, d_in) = d.backward(&dtape, &d_logits, false, true)?;
    let d_in = d_in.expect("requested");
    let (_, mut dy) = d_in.split_channels(mr.channels());
    let (l1, d_l1) = l1_loss(fake, ct)?;
    if lambda_l1 != 0.0 {
        let lam = T::of(lambda_l1);
        for (a, &b) in dy.data_mut().iter_mut().zip(d_l1.data()) {
            *a += lam * b;
        }
    }
    let (grads, _) = g.backward(tape, &dy, false)?;
    Ok((grads, adv + lambda_l1 * l1))
}

/// Generator parameter gradients of `adv(D(mr, G(mr)) → real) + λ_l1·|G(mr) − ct|`
/// with the discriminator held fixed, and that loss.
pub fn generator_gradients<T: Real>(
    g: &Generator<T>,
    d: &Discriminator<T>,
    mr: &Tensor<T>,
    ct: &Tensor<T>,
    lambda_l1: f64,
    kind: GanLoss,
) -> Result<(Vec<LayerGrad<T>>, f64)> {
    let (fake, tape) = g.forward_tape(mr)?;
    generator_step_grads(g, &tape, &fake, d, mr, ct, lambda_l1, kind)
}

fn discriminator_grads(
    d: &Discriminator<f32>,
    real: (&DiscTape<f32>, &Tensor<f32>),
    fake: (&DiscTape<f32>, &Tensor<f32>),
    kind: GanLoss,
) -> Result<Vec<LayerGrad<f32>>> {
    let (_, g_real) = adversarial_loss(real.1, 1.0, kind);
    let (_, g_fake) = adversarial_loss(fake.1, 0.0, kind);
    let (mut grads, _) = d.backward(real.0, &scaled(&g_real, 0.5), true, false)?;
    let (more, _) = d.backward(fake.0, &scaled(&g_fake, 0.5), true, false)?;
    for (a, b) in grads.iter_mut().zip(&more) {
        a.accumulate(b);
    }
    Ok(grads)
}

struct Nets {
    g: Generator<f32>,
    d: Discriminator<f32>,
    g_opt: OptimizerState<f32>,
    d_opt: OptimizerState<f32>,
}

impl Nets {
    /// One discriminator update followed by one generator update. The
    /// returned losses are those of the pre-update networks on this batch.
    fn step(&mut self, mr: &Tensor<f32>, ct: &Tensor<f32>, lr: f64, cfg: &TrainConfig) -> Result<GanLosses> {
        let (fake, g_tape) = self.g.forward_tape(mr)?;
        let (real_logits, real_tape) = self.d.forward_tape(&Tensor::concat_channels(mr, ct)?)?;
        let (fake_logits, fake_tape) = self.d.forward_tape(&Tensor::concat_channels(mr, &fake)?)?;
        let losses = gan_losses(&real_logits, &fake_logits, &fake, ct, cfg.lambda_l1, cfg.gan_loss)?;

        let d_grads = discriminator_grads(
            &self.d,
            (&real_tape, &real_logits),
            (&fake_tape, &fake_logits),
            cfg.gan_loss,
        )?;
        adam_step(self.d.layers_mut(), &d_grads, &mut self.d_opt, lr, cfg)?;

        let (g_grads, _) = generator_step_grads(&self.g, &g_tape, &fake, &self.d, mr, ct, cfg.lambda_l1, cfg.gan_loss)?;
        adam_step(self.g.layers_mut(), &g_grads, &mut self.g_opt, lr, cfg)?;
        Ok(losses)
    }
}

fn evenly_spaced<T>(items: &[T], k: Option<usize>) -> Vec<&T> {
    match k {
        Some(k) if k < items.len() => (0..k).map(|i| &items[i * items.len() / k]).collect(),
        _ => items.iter().collect(),
    }
}

/// Trains one fold from scratch. Every batch runs one discriminator step and
/// then one generator step; validation L1 is measured after each epoch and
/// the lowest-L1 generator is kept alongside the final one.
pub fn train_fold(fold: &Fold, fold_index: usize, data: &[SubjectData], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = tissue_slices(&fold.train, data)?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training slices with tissue"));
    }
    let val_all = tissue_slices(&fold.val, data)?;
    let val: Vec<&SlicePair> = evenly_spaced(&val_all, cfg.val_slices).into_iter().map(|l| &l.slice).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(fold_index as u64);
    let g = Generator::new(cfg.generator, &mut rng)?;
    let d = Discriminator::new(cfg.discriminator, &mut rng)?;
    let mut nets = Nets {
        g_opt: OptimizerState::for_layers(g.layers()),
        d_opt: OptimizerState::for_layers(d.layers()),
        g,
        d,
    };

    let meta = |epoch: Option<usize>, val_l1: f64| {
        serde_json::json!({"fold": fold_index, "epoch": epoch, "val_l1": val_l1, "seed": cfg.seed})
    };
    let initial_val_l1 = validation_l1(&nets.g, &val, cfg.batch_size)?;
    let mut best = Checkpoint::new(nets.g.clone(), meta(None, initial_val_l1));
    let (mut best_val_l1, mut best_epoch) = (initial_val_l1, None);

    let batches = cfg.batches_per_epoch.unwrap_or(train.len().div_ceil(cfg.batch_size));
    let mut sampler = Sampler {
        order: (0..train.len()).collect(),
        pos: train.len(),
    };
    let (h, w) = (train[0].slice.height, train[0].slice.width);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg)?;
        let mut sums = [0.0f64; 3];
        for b in 0..batches {
            let picks: Vec<usize> = (0..cfg.batch_size).map(|_| sampler.next(&mut rng)).collect();
            let shifted: Vec<SlicePair> = picks
                .iter()
                .map(|&i| {
                    let s = &train[i].slice;
                    let (mr, ct, _) = augment_shift(&s.mr, &s.ct, h, w, &mut rng, cfg.max_shift);
                    SlicePair { mr, ct, ..s.clone() }
                })
                .collect();
            let refs: Vec<&SlicePair> = shifted.iter().collect();
            let (mr, ct) = stack(&refs)?;
            let losses = nets.step(&mr, &ct, lr, cfg).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} (epoch {epoch}, batch {b}, {})", describe(&train, &picks))),
                other => other,
            })?;
            if ![losses.g_loss, losses.d_loss, losses.l1_term].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "loss {losses:?} at epoch {epoch}, batch {b} ({})",
                    describe(&train, &picks)
                )));
            }
            sums[0] += losses.g_loss;
            sums[1] += losses.d_loss;
            sums[2] += losses.l1_term;
        }
        let val_l1 = validation_l1(&nets.g, &val, cfg.batch_size)?;
        let n = batches as f64;
        log.push(EpochLog {
            epoch,
            g_loss: sums[0] / n,
            d_loss: sums[1] / n,
            l1_term: sums[2] / n,
            val_l1,
            lr,
        });
        if val_l1 < best_val_l1 {
            best_val_l1 = val_l1;
            best_epoch = Some(epoch);
            best = Checkpoint::new(nets.g.clone(), meta(Some(epoch), val_l1));
        }
    }
    let last_epoch = cfg.epochs.checked_sub(1);
    let last_val = log.last().map_or(initial_val_l1, |e| e.val_l1);
    Ok(TrainOutcome {
        best,
        last: Checkpoint::new(nets.g, meta(last_epoch, last_val)),
        log,
        initial_val_l1,
        best_val_l1,
        best_epoch,
    })
}

fn describe(train: &[Labeled], picks: &[usize]) -> String {
    let parts: Vec<String> = picks
        .iter()
        .map(|&i| format!("subject {} slice {}", train[i].subject, train[i].slice.index))
        .collect();
    parts.join(", ")
}

/// Runs the generator on one normalized 3-echo plane of `h`×`w` pixels and
/// returns HU, padding with background up to the generator's divisor.
pub fn synthesize_slice(g: &Generator<f32>, mr_plane: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    if mr_plane.len() != 3 * h * w {
        return Err(Error::Shape(format!("{} values for a 3x{h}x{w} plane", mr_plane.len())));
    }
    let d = g.arch().divisor();
    let (ph, pw) = (h.div_ceil(d) * d, w.div_ceil(d) * d);
    let mut x = Tensor::filled([1, 3, ph, pw], MR_FILL);
    for c in 0..3 {
        for y in 0..h {
            for z in 0..w {
                x.set(0, c, y, z, mr_plane[(c * h + y) * w + z]);
            }
        }
    }
    let out = g.forward(&x)?;
    let mut hu = Vec::with_capacity(h * w);
    for y in 0..h {
        for z in 0..w {
            hu.push(ct_from_unit(out.at(0, 0, y, z)).clamp(HU_MIN, HU_MAX));
        }
    }
    Ok(hu)
}

/// Synthetic CT on the MR grid, one sagittal slice at a time.
pub fn synthesize_volume(ckpt: &Checkpoint, mr: &[Volume3D; 3]) -> Result<Volume3D> {
    check_mr(mr)?;
    if ckpt.generator.arch().in_channels != 3 {
        return Err(Error::Checkpoint(format!(
            "generator takes {} channels, synthesis supplies 3 echoes",
            ckpt.generator.arch().in_channels
        )));
    }
    let norm = MrNormalizer::fit(mr)?;
    let [nx, ny, nz] = mr[0].dims();
    let mut out = Volume3D::filled(*mr[0].grid(), Unit::Hu, 0.0)?;
    for x in 0..nx {
        let hu = synthesize_slice(&ckpt.generator, &norm.sagittal(mr, x), ny, nz)?;
        for y in 0..ny {
            for z in 0..nz {
                out.set(x, y, z, hu[y * nz + z]);
            }
        }
    }
    Ok(out)
}
