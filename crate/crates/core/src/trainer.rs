//! Training loop: augmentation, label noising, the three decoder losses, RS
//! pseudo labels, one joint SGD step and EMA distillation of the predictor.

use std::fmt::Write as _;

use adseg_autograd::{Gradients, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::TaskConfig;
use crate::diffusion::{diffuse, ddim_generate_batch, make_schedule, NoiseSchedule};
use crate::drs::DifficultyState;
use crate::eval::{batch_dice_per_class, dice_score, predict_volume};
use crate::network::{DecoderRole, DiffVNet, NetConfig};
use crate::objectives::{batch_dice_ce, ramp_weight_with_len, LossReport};
use crate::rs::ensemble;
use crate::svda::{augment, crop_to_patch, SvdaConfig};
use crate::types::{
    argmax_channels, argmax_decode, one_hot_encode, voxel_count, DatasetSplit, LabelMap, ProbKind, ProbMap, Volume,
};
use crate::{Error, Result};

pub const POLY_POWER: f64 = 0.9;

/// `base_lr * (1 - iteration / max_iterations)^0.9`.
pub fn poly_lr(iteration: usize, max_iterations: usize, base_lr: f64) -> f64 {
    let frac = (iteration as f64 / max_iterations as f64).min(1.0);
    base_lr * (1.0 - frac).powf(POLY_POWER)
}

/// SGD with Nesterov momentum: `b = m b + g`, `p -= lr (g + m b)`, where
/// `g` includes optional L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn buffer(&self, index: usize) -> &[f64] {
        &self.buffers[index]
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let buf = &mut self.buffers[id.index()];
            let p = store.get_mut(id).data_mut();
            for ((pv, &gv), bv) in p.iter_mut().zip(g).zip(buf.iter_mut()) {
                let d = gv + self.weight_decay * *pv;
                *bv = self.momentum * *bv + d;
                *pv -= lr * (d + self.momentum * *bv);
            }
        }
    }
}

/// Cycles through shuffled orders of `0..n`.
#[derive(Debug, Clone)]
struct EpochSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        Self { n, order: Vec::new(), pos: 0 }
    }

    fn draw<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Snapshot for checking the EMA rule: decoder tensors right after the
/// optimizer step and before distillation.
#[derive(Debug, Clone)]
pub struct EmaTrace {
    pub theta_before: Vec<Tensor>,
    pub xi: Vec<Tensor>,
    pub psi: Vec<Tensor>,
}

/// Separate parameter gradients of each training loss on one batch.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub deno: Gradients,
    pub diff: Gradients,
    pub unsup: Gradients,
    pub report: LossReport,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub report: LossReport,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "iteration,l_deno,l_diff,l_u,ramp,total,lr";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.iteration, r.report.l_deno, r.report.l_diff, r.report.l_u, r.report.ramp_weight, r.report.total, r.lr
        );
    }
    s
}

/// `class,iteration,w` rows of the difficulty weights used at each step.
pub fn drs_csv(history: &[(usize, Vec<f64>)]) -> String {
    let mut s = String::from("class,iteration,w\n");
    for (it, w) in history {
        for (k, v) in w.iter().enumerate() {
            let _ = writeln!(s, "{k},{it},{v}");
        }
    }
    s
}

struct Prepared {
    x_l: Tensor,
    labels: Vec<LabelMap>,
    y_l: Tensor,
    x_u: Tensor,
}

struct Streams {
    data: ChaCha8Rng,
    noise: ChaCha8Rng,
    gumbel: ChaCha8Rng,
}

struct LossVars {
    deno: Var,
    diff: Var,
    unsup: Var,
    coupled: Option<Var>,
    total: Var,
}

pub struct TrainState {
    pub cfg: TaskConfig,
    pub net: DiffVNet,
    pub difficulty: DifficultyState,
    pub iteration: usize,
    pub best_score: Option<f64>,
    /// Difficulty weights used at each step, kept when `log_drs_weights`.
    pub drs_history: Vec<(usize, Vec<f64>)>,
    sched: NoiseSchedule,
    optimizer: Sgd,
    streams: Streams,
    labeled_sampler: EpochSampler,
    unlabeled_sampler: EpochSampler,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn stack_volumes(vols: &[Volume]) -> Result<Tensor> {
    let items: Vec<Tensor> = vols
        .iter()
        .map(|v| {
            let [d, h, w] = v.dims();
            Tensor::new(&[1, 1, d, h, w], v.data().to_vec())
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(Tensor::stack_batch(&items)?)
}

fn stack_one_hot(labels: &[LabelMap]) -> Result<Tensor> {
    let items: Vec<Tensor> = labels
        .iter()
        .map(|y| -> Result<Tensor> {
            let [d, h, w] = y.dims();
            Ok(Tensor::new(&[1, y.num_classes(), d, h, w], one_hot_encode(y)?.into_data())?)
        })
        .collect::<Result<_>>()?;
    Ok(Tensor::stack_batch(&items)?)
}

impl TrainState {
    pub fn new(cfg: &TaskConfig) -> Result<Self> {
        cfg.validate()?;
        let net_cfg = NetConfig {
            emb_dim: cfg.emb_dim,
            ..NetConfig::new(cfg.num_classes, cfg.feature_size)
        };
        let net = DiffVNet::new(net_cfg, cfg.seed)?;
        let optimizer = Sgd::new(net.store(), cfg.momentum, cfg.weight_decay);
        Ok(Self {
            difficulty: DifficultyState::new(cfg.num_classes, cfg.tau, cfg.alpha_diff)?,
            iteration: 0,
            best_score: None,
            drs_history: Vec::new(),
            sched: make_schedule(cfg.t_diffusion)?,
            optimizer,
            streams: Streams {
                data: stream(cfg.seed, 1),
                noise: stream(cfg.seed, 2),
                gumbel: stream(cfg.seed, 3),
            },
            labeled_sampler: EpochSampler::new(0),
            unlabeled_sampler: EpochSampler::new(0),
            net,
            cfg: cfg.clone(),
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn optimizer(&self) -> &Sgd {
        &self.optimizer
    }

    pub fn current_lr(&self) -> f64 {
        poly_lr(self.iteration, self.cfg.max_iterations, self.cfg.base_lr)
    }

    pub fn current_ramp(&self) -> f64 {
        ramp_weight_with_len(
            self.iteration,
            self.cfg.ramp_fraction * self.cfg.max_iterations as f64,
            self.cfg.mu_unsup,
        )
    }

    fn prepare(&mut self, labeled: &[(Volume, LabelMap)], unlabeled: &[Volume]) -> Result<Prepared> {
        if labeled.is_empty() || unlabeled.is_empty() {
            return Err(Error::InvalidArgument("training step needs nonempty labeled and unlabeled batches".into()));
        }
        let patch = self.cfg.patch_size;
        let svda = SvdaConfig::new(patch);
        let rng = &mut self.streams.data;
        let mut vols = Vec::with_capacity(labeled.len());
        let mut labels = Vec::with_capacity(labeled.len());
        for (v, y) in labeled {
            let a = augment(v, Some(y), self.cfg.n_aug, &svda, rng)?;
            let (v, y) = crop_to_patch(&a.volume, a.label.as_ref(), patch, rng)?;
            vols.push(v);
            labels.push(y.expect("label kept through augmentation"));
        }
        let mut uvols = Vec::with_capacity(unlabeled.len());
        for v in unlabeled {
            let a = augment(v, None, self.cfg.n_aug, &svda, rng)?;
            uvols.push(crop_to_patch(&a.volume, None, patch, rng)?.0);
        }
        Ok(Prepared {
            x_l: stack_volumes(&vols)?,
            y_l: stack_one_hot(&labels)?,
            labels,
            x_u: stack_volumes(&uvols)?,
        })
    }

    /// Records every loss of one step in a fresh graph over the current
    /// parameters. Pseudo labels come from forward-only passes.
    fn losses<'p>(
        net: &'p DiffVNet,
        cfg: &TaskConfig,
        sched: &NoiseSchedule,
        difficulty: &mut DifficultyState,
        streams: &mut Streams,
        ramp: f64,
        batch: &Prepared,
    ) -> Result<(Graph<'p>, LossVars, LossReport, Vec<f64>)> {
        let k = cfg.num_classes;
        let n_l = batch.labels.len();
        let dims = batch.labels[0].dims();
        let s = voxel_count(dims);
        let mut g = Graph::new(net.store());

        // denoising flow
        let t = streams.noise.random_range(1..=sched.steps());
        let eps: Vec<f64> = (0..batch.y_l.len()).map(|_| StandardNormal.sample(&mut streams.noise)).collect();
        let y_t = Tensor::new(batch.y_l.shape(), diffuse(batch.y_l.data(), t, &eps, sched)?)?;
        let h = net.encode_denoising(&mut g, &batch.x_l, &y_t, &vec![t; n_l])?;
        let logits_xi = net.decode(&mut g, DecoderRole::Xi, &h)?;
        let (l_deno, grad) = batch_dice_ce(g.value(logits_xi), &batch.y_l, None)?;
        let deno = g.loss(logits_xi, l_deno, grad)?;

        let per = k * s;
        let preds: Vec<Vec<u8>> = g
            .value(logits_xi)
            .data()
            .chunks(per)
            .map(|c| argmax_channels(c, k))
            .collect();
        let pred_refs: Vec<&[u8]> = preds.iter().map(Vec::as_slice).collect();
        let gt_refs: Vec<&[u8]> = batch.labels.iter().map(LabelMap::data).collect();
        difficulty.observe(&batch_dice_per_class(&pred_refs, &gt_refs, k))?;
        let weights = difficulty.weights();

        // difficulty-aware flow
        let h_l = net.encode_plain(&mut g, &batch.x_l)?;
        let logits_psi = net.decode(&mut g, DecoderRole::Psi, &h_l)?;
        let (l_diff, grad) = batch_dice_ce(g.value(logits_psi), &batch.y_l, Some(&weights))?;
        let diff = g.loss(logits_psi, l_diff, grad)?;

        // pseudo labels
        let n_u = batch.x_u.shape()[0];
        let x_u = &batch.x_u;
        let shape = [n_u, k, dims[0], dims[1], dims[2]];
        let p_xi = ddim_generate_batch(
            |y, t| {
                let y_t = Tensor::new(&shape, y.to_vec())?;
                Ok(net.denoise_logits(x_u, &y_t, &vec![t; n_u])?.into_data())
            },
            n_u,
            k,
            s,
            cfg.ddim_steps,
            sched,
            &mut streams.noise,
        )?;
        let p_psi = net.plain_logits(DecoderRole::Psi, x_u)?;
        let mut pseudo = Vec::with_capacity(n_u);
        for i in 0..n_u {
            let span = i * per..(i + 1) * per;
            let a = ProbMap::new(k, dims, p_xi[span.clone()].to_vec(), ProbKind::Simplex)?;
            let b = ProbMap::logits(k, dims, p_psi.data()[span].to_vec())?;
            pseudo.push(ensemble(&a, &b, &cfg.rs, &mut streams.gumbel)?);
        }
        let y_u = stack_one_hot(&pseudo)?;

        // predictor flow
        let h_u = net.encode_plain(&mut g, x_u)?;
        let logits_theta = net.decode(&mut g, DecoderRole::Theta, &h_u)?;
        let (l_u, grad) = batch_dice_ce(g.value(logits_theta), &y_u, None)?;
        let unsup = g.loss(logits_theta, l_u, grad)?;

        let mut terms = vec![(deno, 1.0), (diff, 1.0), (unsup, ramp)];
        let mut l_coupled = 0.0;
        let coupled = if cfg.couple_theta {
            let logits = net.decode(&mut g, DecoderRole::Theta, &h_l)?;
            let (l, grad) = batch_dice_ce(g.value(logits), &batch.y_l, None)?;
            l_coupled = l;
            let v = g.loss(logits, l, grad)?;
            terms.push((v, 1.0));
            Some(v)
        } else {
            None
        };
        let total = g.weighted_sum(&terms)?;
        let report = LossReport::new(l_deno, l_diff, l_u, ramp, l_coupled);
        Ok((
            g,
            LossVars {
                deno,
                diff,
                unsup,
                coupled,
                total,
            },
            report,
            weights,
        ))
    }

    fn check_finite(&self, report: &LossReport) -> Result<()> {
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                detail: format!(
                    "l_deno={} l_diff={} l_u={} l_coupled={}; try a lower base_lr",
                    report.l_deno, report.l_diff, report.l_u, report.l_coupled
                ),
            });
        }
        Ok(())
    }

    fn step_impl(
        &mut self,
        labeled: &[(Volume, LabelMap)],
        unlabeled: &[Volume],
        trace: bool,
    ) -> Result<(LossReport, Option<EmaTrace>)> {
        let batch = self.prepare(labeled, unlabeled)?;
        let ramp = self.current_ramp();
        let lr = self.current_lr();
        let (report, grads, weights) = {
            let (g, vars, report, weights) = Self::losses(
                &self.net,
                &self.cfg,
                &self.sched,
                &mut self.difficulty,
                &mut self.streams,
                ramp,
                &batch,
            )?;
            self.check_finite(&report)?;
            (report, g.backward(vars.total)?, weights)
        };
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                detail: "non-finite gradient; try a lower base_lr".into(),
            });
        }
        if self.cfg.log_drs_weights {
            self.drs_history.push((self.iteration, weights));
        }
        self.optimizer.step(self.net.store_mut(), &grads, lr);
        let snapshot = trace.then(|| {
            let grab = |role| {
                self.net
                    .decoder_ids(role)
                    .into_iter()
                    .map(|id| self.net.store().get(id).clone())
                    .collect()
            };
            EmaTrace {
                theta_before: grab(DecoderRole::Theta),
                xi: grab(DecoderRole::Xi),
                psi: grab(DecoderRole::Psi),
            }
        });
        self.net.ema_distill(self.cfg.w_ema)?;
        self.iteration += 1;
        Ok((report, snapshot))
    }

    /// One training iteration on explicit batches.
    pub fn train_step(&mut self, labeled: &[(Volume, LabelMap)], unlabeled: &[Volume]) -> Result<LossReport> {
        Ok(self.step_impl(labeled, unlabeled, false)?.0)
    }

    /// As [`TrainState::train_step`], also returning the decoder tensors
    /// seen by the EMA update.
    pub fn train_step_traced(
        &mut self,
        labeled: &[(Volume, LabelMap)],
        unlabeled: &[Volume],
    ) -> Result<(LossReport, EmaTrace)> {
        let (r, t) = self.step_impl(labeled, unlabeled, true)?;
        Ok((r, t.expect("trace requested")))
    }

    /// Gradients of each loss separately, without updating parameters.
    /// Random streams and the difficulty history still advance.
    pub fn loss_gradients(&mut self, labeled: &[(Volume, LabelMap)], unlabeled: &[Volume]) -> Result<LossGradients> {
        let batch = self.prepare(labeled, unlabeled)?;
        let ramp = self.current_ramp();
        let (g, vars, report, _) = Self::losses(
            &self.net,
            &self.cfg,
            &self.sched,
            &mut self.difficulty,
            &mut self.streams,
            ramp,
            &batch,
        )?;
        let mut deno = g.backward(vars.deno)?;
        if let Some(c) = vars.coupled {
            deno.add(&g.backward(c)?);
        }
        Ok(LossGradients {
            deno,
            diff: g.backward(vars.diff)?,
            unsup: g.backward(vars.unsup)?,
            report,
        })
    }

    /// Draws the next labeled and unlabeled batches (labeled volumes stand
    /// in for unlabeled ones when the split has none).
    pub fn next_batches(&mut self, split: &DatasetSplit) -> (Vec<(Volume, LabelMap)>, Vec<Volume>) {
        let b = self.cfg.batch_size;
        if self.labeled_sampler.n != split.labeled.len() {
            self.labeled_sampler = EpochSampler::new(split.labeled.len());
        }
        let li = self.labeled_sampler.draw(b, &mut self.streams.data);
        let labeled = li.iter().map(|&i| split.labeled[i].clone()).collect();
        let unlabeled = if split.unlabeled.is_empty() {
            if self.unlabeled_sampler.n != split.labeled.len() {
                self.unlabeled_sampler = EpochSampler::new(split.labeled.len());
            }
            let ui = self.unlabeled_sampler.draw(b, &mut self.streams.data);
            ui.iter().map(|&i| split.labeled[i].0.clone()).collect()
        } else {
            if self.unlabeled_sampler.n != split.unlabeled.len() {
                self.unlabeled_sampler = EpochSampler::new(split.unlabeled.len());
            }
            let ui = self.unlabeled_sampler.draw(b, &mut self.streams.data);
            ui.iter().map(|&i| split.unlabeled[i].clone()).collect()
        };
        (labeled, unlabeled)
    }
}

/// Mean foreground Dice of the predictor over labeled volumes.
pub fn labeled_dice(net: &DiffVNet, volumes: &[(Volume, LabelMap)], patch: crate::Dims, overlap: f64) -> Result<f64> {
    if volumes.is_empty() {
        return Err(Error::InvalidArgument("no volumes to score".into()));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (v, y) in volumes {
        let pred = argmax_decode(&predict_volume(net, v, patch, overlap)?)?;
        for c in 1..y.num_classes() as u8 {
            acc += dice_score(&pred, y, c)?;
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub log: Vec<LogRow>,
    pub best_score: f64,
    pub best_iteration: usize,
    pub final_score: f64,
}

/// Runs `max_iterations` steps, validating every `val_every` iterations and
/// at the end; the best predictor parameters are restored on return.
pub fn fit(state: &mut TrainState, split: &DatasetSplit) -> Result<FitOutcome> {
    if split.num_classes != state.cfg.num_classes {
        return Err(Error::Config(format!(
            "data has {} classes, config expects {}",
            split.num_classes, state.cfg.num_classes
        )));
    }
    let mut log = Vec::with_capacity(state.cfg.max_iterations);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut final_score = 0.0;
    while state.iteration < state.cfg.max_iterations {
        let lr = state.current_lr();
        let (labeled, unlabeled) = state.next_batches(split);
        let report = state.train_step(&labeled, &unlabeled)?;
        log.push(LogRow {
            iteration: state.iteration,
            report,
            lr,
        });
        let it = state.iteration;
        if it % state.cfg.val_every == 0 || it == state.cfg.max_iterations {
            let score = labeled_dice(&state.net, &split.labeled, state.cfg.patch_size, state.cfg.overlap)?;
            log::info!("iteration {it}: total loss {:.4}, labeled Dice {score:.4}", report.total);
            final_score = score;
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, it, state.net.store().clone()));
            }
        }
    }
    let (best_score, best_iteration, params) = best.expect("at least one validation");
    state.net.set_params(params)?;
    state.best_score = Some(best_score);
    Ok(FitOutcome {
        log,
        best_score,
        best_iteration,
        final_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_points() {
        assert_eq!(poly_lr(0, 100, 1e-2), 1e-2);
        assert_eq!(poly_lr(100, 100, 1e-2), 0.0);
        assert!((poly_lr(50, 100, 1e-2) - 5.359e-3).abs() < 1e-6);
    }

    #[test]
    fn sampler_visits_every_index_per_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = EpochSampler::new(5);
        let mut first = s.draw(5, &mut rng);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.draw(7, &mut rng).len(), 7);
    }

    #[test]
    fn log_format() {
        let rows = [LogRow {
            iteration: 1,
            report: LossReport::new(0.5, 0.25, 0.125, 1.0, 0.0),
            lr: 0.01,
        }];
        assert_eq!(log_csv(&rows), format!("{LOG_HEADER}\n1,0.5,0.25,0.125,1,0.875,0.01\n"));
    }
}
