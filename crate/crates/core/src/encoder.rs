//! Conditional VAE over short windows of human interaction.
//!
//! The recognition network `q(z1 | errors, actions, states)` maps an `n_h`-step
//! window to a diagonal Gaussian; the generative network
//! `p(errors, actions | states, z1)` reconstructs the per-step action and
//! error classes. The training objective is the negative ELBO
//! `recon + KL(q || N(0, I))`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agents::{human_error, ObsPolicy, ERROR_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Adam, Mlp};
use crate::record::EpisodeRecord;
use crate::region::RobotObservation;
use crate::scalar::{log_softmax, softmax, Scalar};
use crate::shared::{HumanActionToken, ObsLayout};

pub const DEFAULT_D_Z1: usize = 5;
pub const DEFAULT_N_H: usize = 2;

const ACTION_CLASSES: usize = HumanActionToken::CLASSES;
const STEP_CLASSES: usize = ACTION_CLASSES + ERROR_CLASSES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    pub d_z1: usize,
    pub n_h: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub noise_std: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            d_z1: DEFAULT_D_Z1,
            n_h: DEFAULT_N_H,
            hidden: 64,
            learning_rate: 5e-4,
            batch_size: 5,
            epochs: 200,
            patience: 20,
            noise_std: 0.05,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_z1 == 0 || self.n_h == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("cvae dimensions and batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) || self.noise_std < 0.0 || self.learning_rate < 0.0 {
            return Err(Error::Config("cvae train_fraction, noise_std or learning_rate out of range".into()));
        }
        Ok(())
    }
}

/// `n_h` consecutive steps of encoded state, human token and error class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryWindow {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<HumanActionToken>,
    pub errors: Vec<usize>,
}

impl HistoryWindow {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn check(&self, n_h: usize, state_dim: usize) -> Result<()> {
        if self.states.len() != n_h || self.actions.len() != n_h || self.errors.len() != n_h {
            return Err(Error::Dimension {
                what: "history window length",
                expected: n_h,
                actual: self.states.len().min(self.actions.len()).min(self.errors.len()),
            });
        }
        if let Some(s) = self.states.iter().find(|s| s.len() != state_dim) {
            return Err(Error::Dimension {
                what: "history window state",
                expected: state_dim,
                actual: s.len(),
            });
        }
        if self.errors.iter().any(|&e| e >= ERROR_CLASSES) {
            return Err(Error::Usage("error class out of range".into()));
        }
        Ok(())
    }

    fn encoder_input<T: Scalar>(&self) -> Vec<T> {
        let mut x = Vec::new();
        for k in 0..self.states.len() {
            x.extend(self.states[k].iter().map(|&v| T::lit(v)));
            let mut hot = [T::zero(); STEP_CLASSES];
            hot[self.actions[k].slot()] = T::one();
            hot[ACTION_CLASSES + self.errors[k]] = T::one();
            x.extend_from_slice(&hot);
        }
        x
    }

    fn decoder_input<T: Scalar>(&self, z: &[T]) -> Vec<T> {
        let mut x: Vec<T> = self.states.iter().flatten().map(|&v| T::lit(v)).collect();
        x.extend_from_slice(z);
        x
    }
}

/// One step of interaction history as seen by the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryStep {
    pub obs: RobotObservation,
    pub a_h: HumanActionToken,
    pub error: usize,
}

impl HistoryStep {
    /// Labels the step with the error class against the surrogate's greedy action.
    pub fn new<P: ObsPolicy + ?Sized>(obs: RobotObservation, a_h: HumanActionToken, surrogate: &P) -> Result<Self> {
        let a_star = surrogate.greedy(&obs)?;
        Ok(Self {
            error: human_error(a_h, a_star).index,
            obs,
            a_h,
        })
    }
}

/// Builds a window from the last `n_h` steps, or `None` if history is shorter.
pub fn window_from_history(layout: &ObsLayout, history: &[HistoryStep], n_h: usize) -> Result<Option<HistoryWindow>> {
    if history.len() < n_h {
        return Ok(None);
    }
    let tail = &history[history.len() - n_h..];
    Ok(Some(HistoryWindow {
        states: tail.iter().map(|h| layout.encode_robot::<f64>(&h.obs)).collect::<Result<_>>()?,
        actions: tail.iter().map(|h| h.a_h).collect(),
        errors: tail.iter().map(|h| h.error).collect(),
    }))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowDataset {
    pub train: Vec<HistoryWindow>,
    pub validation: Vec<HistoryWindow>,
    /// Episodes too short to yield a window.
    pub skipped: usize,
}

/// Slides an `n_h` window over every episode, labels errors against the
/// surrogate, perturbs the one-hot state blocks with Gaussian noise and
/// splits windows at random into train and validation sets.
pub fn build_dataset<P, R>(
    episodes: &[EpisodeRecord],
    surrogate: &P,
    layout: &ObsLayout,
    config: &CvaeConfig,
    rng: &mut R,
) -> Result<WindowDataset>
where
    P: ObsPolicy + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    if episodes.is_empty() {
        return Err(Error::Usage("no episodes to build a dataset from".into()));
    }
    let one_hot = layout.n_c + layout.n_r + layout.p_max as usize + 1;
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut windows = Vec::new();
    let mut skipped = 0;
    for ep in episodes {
        if ep.len() < config.n_h {
            skipped += 1;
            continue;
        }
        let history: Vec<HistoryStep> = ep
            .steps
            .iter()
            .map(|s| HistoryStep::new(s.obs.clone(), s.a_h, surrogate))
            .collect::<Result<_>>()?;
        for t in config.n_h - 1..history.len() {
            let mut w = window_from_history(layout, &history[..=t], config.n_h)?.expect("window fits");
            if config.noise_std > 0.0 {
                for s in &mut w.states {
                    for v in &mut s[..one_hot] {
                        *v += noise.sample(rng);
                    }
                }
            }
            windows.push(w);
        }
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(rng);
    let n_train = (config.train_fraction * windows.len() as f64).round() as usize;
    let mut slots: Vec<Option<HistoryWindow>> = windows.into_iter().map(Some).collect();
    let mut ds = WindowDataset {
        skipped,
        ..Default::default()
    };
    for (rank, &i) in order.iter().enumerate() {
        let w = slots[i].take().expect("each window used once");
        if rank < n_train {
            ds.train.push(w);
        } else {
            ds.validation.push(w);
        }
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeModel<T> {
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
    pub n_h: usize,
    pub state_dim: usize,
    pub d_z1: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeLoss<T> {
    pub total: T,
    pub recon: T,
    pub kl: T,
    pub encoder_grad: Vec<T>,
    pub decoder_grad: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZMode {
    Mean,
    Sample,
    Zero,
}

impl<T: Scalar> CvaeModel<T> {
    pub fn encoder_widths(n_h: usize, state_dim: usize, hidden: usize, d_z1: usize) -> Vec<usize> {
        vec![n_h * (state_dim + STEP_CLASSES), hidden, 2 * d_z1]
    }

    pub fn decoder_widths(n_h: usize, state_dim: usize, hidden: usize, d_z1: usize) -> Vec<usize> {
        vec![n_h * state_dim + d_z1, hidden, n_h * STEP_CLASSES]
    }

    pub fn new<R: Rng + ?Sized>(n_h: usize, state_dim: usize, hidden: usize, d_z1: usize, rng: &mut R) -> Self {
        Self {
            encoder: Mlp::new(&Self::encoder_widths(n_h, state_dim, hidden, d_z1), 0.1, rng),
            decoder: Mlp::new(&Self::decoder_widths(n_h, state_dim, hidden, d_z1), 0.1, rng),
            n_h,
            state_dim,
            d_z1,
        }
    }

    pub fn from_parts(encoder: Mlp<T>, decoder: Mlp<T>, n_h: usize, state_dim: usize) -> Result<Self> {
        let d_z1 = encoder.output_dim() / 2;
        let hidden = encoder.widths()[1];
        let ok = encoder.widths() == Self::encoder_widths(n_h, state_dim, hidden, d_z1).as_slice()
            && decoder.widths() == Self::decoder_widths(n_h, state_dim, decoder.widths()[1], d_z1).as_slice()
            && encoder.widths().len() == 3
            && decoder.widths().len() == 3;
        if !ok {
            return Err(Error::Config(format!(
                "incompatible cvae widths {:?} / {:?} for n_h {n_h}, state {state_dim}",
                encoder.widths(),
                decoder.widths()
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            n_h,
            state_dim,
            d_z1,
        })
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params()
    }

    /// Posterior mean and log-variance.
    pub fn posterior(&self, window: &HistoryWindow) -> Result<(Vec<T>, Vec<T>)> {
        window.check(self.n_h, self.state_dim)?;
        let out = self.encoder.predict(&window.encoder_input())?;
        let (mu, lv) = out.split_at(self.d_z1);
        Ok((mu.to_vec(), lv.to_vec()))
    }

    /// Per-step action and error logits given a latent.
    pub fn decode(&self, window: &HistoryWindow, z: &[T]) -> Result<Vec<T>> {
        window.check(self.n_h, self.state_dim)?;
        self.decoder.predict(&window.decoder_input(z))
    }

    /// Loss and gradients for one window with a fixed reparameterisation
    /// noise `eps`; `eps = 0` evaluates at the posterior mean.
    pub fn loss_with_eps(&self, window: &HistoryWindow, eps: &[T]) -> Result<CvaeLoss<T>> {
        window.check(self.n_h, self.state_dim)?;
        if eps.len() != self.d_z1 {
            return Err(Error::Dimension {
                what: "reparameterisation noise",
                expected: self.d_z1,
                actual: eps.len(),
            });
        }
        let half = T::lit(0.5);
        let enc_trace = self.encoder.forward(&window.encoder_input())?;
        let (mu, lv) = enc_trace.output().split_at(self.d_z1);
        let sigma: Vec<T> = lv.iter().map(|&l| (half * l).exp()).collect();
        let z: Vec<T> = (0..self.d_z1).map(|i| mu[i] + sigma[i] * eps[i]).collect();

        let dec_trace = self.decoder.forward(&window.decoder_input(&z))?;
        let logits = dec_trace.output();
        let mut recon = T::zero();
        let mut g_logits = vec![T::zero(); logits.len()];
        for k in 0..self.n_h {
            let base = k * STEP_CLASSES;
            let heads = [
                (base, ACTION_CLASSES, window.actions[k].slot()),
                (base + ACTION_CLASSES, ERROR_CLASSES, window.errors[k]),
            ];
            for (off, n, target) in heads {
                let l = &logits[off..off + n];
                recon -= log_softmax(l)[target];
                for (j, p) in softmax(l).into_iter().enumerate() {
                    g_logits[off + j] = p - if j == target { T::one() } else { T::zero() };
                }
            }
        }
        let kl = (0..self.d_z1)
            .map(|i| half * (mu[i] * mu[i] + lv[i].exp() - T::one() - lv[i]))
            .sum::<T>();

        let mut decoder_grad = vec![T::zero(); self.decoder.num_params()];
        let g_in = self.decoder.backward(&dec_trace, &g_logits, &mut decoder_grad);
        let g_z = &g_in[self.n_h * self.state_dim..];
        let mut g_enc_out = vec![T::zero(); 2 * self.d_z1];
        for i in 0..self.d_z1 {
            g_enc_out[i] = g_z[i] + mu[i];
            g_enc_out[self.d_z1 + i] = g_z[i] * eps[i] * half * sigma[i] + half * (lv[i].exp() - T::one());
        }
        let mut encoder_grad = vec![T::zero(); self.encoder.num_params()];
        self.encoder.backward_params(&enc_trace, &g_enc_out, &mut encoder_grad);
        Ok(CvaeLoss {
            total: recon + kl,
            recon,
            kl,
            encoder_grad,
            decoder_grad,
        })
    }

    /// Loss with freshly sampled reparameterisation noise.
    pub fn loss<R: Rng + ?Sized>(&self, window: &HistoryWindow, rng: &mut R) -> Result<CvaeLoss<T>> {
        let eps: Vec<T> = (0..self.d_z1)
            .map(|_| T::lit(StandardNormal.sample(rng)))
            .collect();
        self.loss_with_eps(window, &eps)
    }

    /// Mean-mode (`eps = 0`) loss averaged over `windows`, without gradients.
    pub fn mean_loss(&self, windows: &[HistoryWindow]) -> Result<LossParts> {
        let mut acc = LossParts::default();
        for w in windows {
            let (mu, lv) = self.posterior(w)?;
            let logits = self.decode(w, &mu)?;
            let mut recon = 0.0;
            for k in 0..self.n_h {
                let base = k * STEP_CLASSES;
                recon -= log_softmax(&logits[base..base + ACTION_CLASSES])[w.actions[k].slot()].as_f64();
                recon -= log_softmax(&logits[base + ACTION_CLASSES..base + STEP_CLASSES])[w.errors[k]].as_f64();
            }
            let kl: f64 = mu
                .iter()
                .zip(&lv)
                .map(|(&m, &l)| 0.5 * (m * m + l.exp() - T::one() - l).as_f64())
                .sum();
            acc.recon += recon;
            acc.kl += kl;
        }
        let n = windows.len().max(1) as f64;
        acc.recon /= n;
        acc.kl /= n;
        acc.total = acc.recon + acc.kl;
        Ok(acc)
    }

    /// Fraction of human tokens reconstructed by the argmax of the action head
    /// with `z1` at the posterior mean.
    pub fn action_accuracy(&self, windows: &[HistoryWindow]) -> Result<f64> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for w in windows {
            let (mu, _) = self.posterior(w)?;
            let logits = self.decode(w, &mu)?;
            for k in 0..self.n_h {
                let base = k * STEP_CLASSES;
                let pred = crate::scalar::argmax(&logits[base..base + ACTION_CLASSES]);
                hits += usize::from(pred == w.actions[k].slot());
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
    }

    pub fn encode_z1<R: Rng + ?Sized>(&self, window: &HistoryWindow, mode: ZMode, rng: &mut R) -> Result<Vec<T>> {
        match mode {
            ZMode::Zero => Ok(vec![T::zero(); self.d_z1]),
            ZMode::Mean => Ok(self.posterior(window)?.0),
            ZMode::Sample => {
                let (mu, lv) = self.posterior(window)?;
                Ok(mu
                    .iter()
                    .zip(&lv)
                    .map(|(&m, &l)| m + (T::lit(0.5) * l).exp() * T::lit(StandardNormal.sample(rng)))
                    .collect())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Per-epoch losses; both series are evaluated in mean mode after the epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CvaeCurves {
    pub train: Vec<LossParts>,
    pub validation: Vec<LossParts>,
    pub best_epoch: usize,
}

impl CvaeCurves {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_total", "train_recon", "train_kl", "val_total", "val_recon", "val_kl"])?;
        for (e, (t, v)) in self.train.iter().zip(&self.validation).enumerate() {
            w.write_record(&[
                (e + 1).to_string(),
                t.total.to_string(),
                t.recon.to_string(),
                t.kl.to_string(),
                v.total.to_string(),
                v.recon.to_string(),
                v.kl.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Minibatch Adam on the mean negative ELBO with early stopping on the
/// validation loss. Returns the best-validation parameters.
pub fn train_cvae<T: Scalar>(model: &mut CvaeModel<T>, data: &WindowDataset, config: &CvaeConfig) -> Result<CvaeCurves> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Usage("empty cvae training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut enc_opt = Adam::<T>::new(model.encoder.num_params(), config.learning_rate);
    let mut dec_opt = Adam::<T>::new(model.decoder.num_params(), config.learning_rate);
    let val_set = if data.validation.is_empty() { &data.train } else { &data.validation };
    let mut curves = CvaeCurves::default();
    let mut best = (f64::INFINITY, model.clone());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut stale = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let scale = T::lit(1.0 / chunk.len() as f64);
            let mut ge = vec![T::zero(); model.encoder.num_params()];
            let mut gd = vec![T::zero(); model.decoder.num_params()];
            for &i in chunk {
                let l = model.loss(&data.train[i], &mut rng)?;
                if !l.total.is_finite() {
                    return Err(Error::Diverged(format!("non-finite cvae loss in epoch {}", epoch + 1)));
                }
                ge.iter_mut().zip(&l.encoder_grad).for_each(|(a, &b)| *a += b * scale);
                gd.iter_mut().zip(&l.decoder_grad).for_each(|(a, &b)| *a += b * scale);
            }
            clip_grad_norm(&mut [&mut ge[..], &mut gd[..]], 5.0);
            enc_opt.step(model.encoder.params_mut(), &ge);
            dec_opt.step(model.decoder.params_mut(), &gd);
        }
        let train = model.mean_loss(&data.train)?;
        let val = model.mean_loss(val_set)?;
        if !val.total.is_finite() {
            return Err(Error::Diverged(format!("non-finite validation loss in epoch {}", epoch + 1)));
        }
        curves.train.push(train);
        curves.validation.push(val);
        if val.total < best.0 {
            best = (val.total, model.clone());
            curves.best_epoch = epoch + 1;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    *model = best.1;
    Ok(curves)
}

/// Accuracy of always predicting the most frequent training token.
pub fn majority_baseline(train: &[HistoryWindow], eval: &[HistoryWindow]) -> f64 {
    let mut counts = [0usize; ACTION_CLASSES];
    for w in train {
        for a in &w.actions {
            counts[a.slot()] += 1;
        }
    }
    let major = (0..ACTION_CLASSES).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap_or(0);
    let (mut hits, mut total) = (0usize, 0usize);
    for w in eval {
        for a in &w.actions {
            hits += usize::from(a.slot() == major);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(n_h: usize, dim: usize, seed: u64) -> HistoryWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HistoryWindow {
            states: (0..n_h).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            actions: (0..n_h).map(|_| HumanActionToken::new(rng.random_range(-1..4)).unwrap()).collect(),
            errors: (0..n_h).map(|_| rng.random_range(0..ERROR_CLASSES)).collect(),
        }
    }

    #[test]
    fn kl_vanishes_at_the_prior() {
        let mut m = CvaeModel::<f64>::new(2, 3, 8, 5, &mut ChaCha8Rng::seed_from_u64(0));
        m.encoder.zero_output_layer();
        let l = m.loss_with_eps(&window(2, 3, 1), &[0.3; 5]).unwrap();
        assert_eq!(l.kl, 0.0);
        assert_eq!(l.total, l.recon + l.kl);
    }

    #[test]
    fn uniform_heads_cost_log_classes() {
        let mut m = CvaeModel::<f64>::new(2, 3, 8, 5, &mut ChaCha8Rng::seed_from_u64(0));
        m.decoder.zero_output_layer();
        let l = m.loss_with_eps(&window(2, 3, 1), &[0.0; 5]).unwrap();
        let expected = 2.0 * ((5f64).ln() + (4f64).ln());
        assert!((l.recon - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_of_shifted_unit_gaussian() {
        // Unit variance: KL = |mu|^2 / 2.
        let mut m = CvaeModel::<f64>::new(1, 2, 4, 5, &mut ChaCha8Rng::seed_from_u64(3));
        m.encoder.zero_output_layer();
        let mu = [0.5, -1.0, 0.25, 2.0, 0.0];
        let n = m.encoder.num_params();
        let p = m.encoder.params_mut();
        for (i, &v) in mu.iter().enumerate() {
            p[n - 10 + i] = v;
        }
        let l = m.loss_with_eps(&window(1, 2, 4), &[0.0; 5]).unwrap();
        let expect: f64 = mu.iter().map(|v| v * v / 2.0).sum();
        assert!((l.kl - expect).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = CvaeModel::<f64>::new(2, 4, 6, 3, &mut rng);
        let w = window(2, 4, 5);
        let eps = [0.7, -0.4, 1.1];
        let l = m.loss_with_eps(&w, &eps).unwrap();
        let h = 1e-6;
        let check = |analytic: &[f64], which: usize| {
            for i in 0..analytic.len() {
                let mut up = m.clone();
                let mut dn = m.clone();
                let (pu, pd) = if which == 0 {
                    (up.encoder.params_mut(), dn.encoder.params_mut())
                } else {
                    (up.decoder.params_mut(), dn.decoder.params_mut())
                };
                pu[i] += h;
                pd[i] -= h;
                let fd = (up.loss_with_eps(&w, &eps).unwrap().total - dn.loss_with_eps(&w, &eps).unwrap().total) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
                assert!(err <= 1e-4 || (fd - analytic[i]).abs() < 1e-8, "param {i}: {fd} vs {}", analytic[i]);
            }
        };
        check(&l.encoder_grad, 0);
        check(&l.decoder_grad, 1);
    }

    #[test]
    fn encode_modes() {
        let m = CvaeModel::<f32>::new(2, 3, 8, 5, &mut ChaCha8Rng::seed_from_u64(0));
        let w = window(2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(m.encode_z1(&w, ZMode::Zero, &mut rng).unwrap(), vec![0.0; 5]);
        let a = m.encode_z1(&w, ZMode::Mean, &mut rng).unwrap();
        assert_eq!(a, m.encode_z1(&w, ZMode::Mean, &mut rng).unwrap());
        let s1 = m.encode_z1(&w, ZMode::Sample, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let s2 = m.encode_z1(&w, ZMode::Sample, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 5);
    }

    #[test]
    fn zero_learning_rate_keeps_loss_flat() {
        let mut m = CvaeModel::<f64>::new(2, 3, 8, 5, &mut ChaCha8Rng::seed_from_u64(0));
        let data = WindowDataset {
            train: (0..10).map(|s| window(2, 3, s)).collect(),
            validation: (10..14).map(|s| window(2, 3, s)).collect(),
            skipped: 0,
        };
        let cfg = CvaeConfig {
            learning_rate: 0.0,
            epochs: 5,
            patience: 100,
            ..Default::default()
        };
        let curves = train_cvae(&mut m, &data, &cfg).unwrap();
        assert!(curves.validation.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn majority_baseline_counts() {
        let mk = |a: &[i64]| HistoryWindow {
            states: vec![vec![0.0]; a.len()],
            actions: a.iter().map(|&v| HumanActionToken::new(v).unwrap()).collect(),
            errors: vec![0; a.len()],
        };
        let train = [mk(&[1, 1]), mk(&[2, 1])];
        let eval = [mk(&[1, 3]), mk(&[-1, 1])];
        assert_eq!(majority_baseline(&train, &eval), 0.5);
    }
}
