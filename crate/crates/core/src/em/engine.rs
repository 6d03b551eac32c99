use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{build_param_grid, ParamGrid};
use super::{BinPrior, EmConfig, SoftMask};
use crate::dsp::wrap_phase;
use crate::error::{Error, Result};
use crate::grid::TfGrid;
use crate::mixture::InterauralObservation;
use crate::models::{comb_ipd_model, garbage_model, CombParams, SourceCueModel, LOG_UNIFORM_IPD};

/// Initial comb parameters and ILD prior mean for one real source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceInit {
    pub comb: CombParams,
    pub ild_mean_db: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmDiagnostics {
    /// Largest |sum of posteriors - 1| over non-silent bins, per iteration.
    pub max_norm_error: Vec<f64>,
    /// Bins whose every component had zero likelihood, per iteration.
    pub degenerate_bins: Vec<usize>,
    /// (component, bin) pairs left unchanged for lack of occupation, per M-step.
    pub frozen: Vec<usize>,
}

/// Models and mixing weights. `models` holds the real sources in order,
/// then the garbage source if enabled. `beta` is flattened in the same
/// order with one entry per (source, candidate).
#[derive(Debug, Clone, PartialEq)]
pub struct EmState {
    pub grid: ParamGrid,
    pub models: Vec<SourceCueModel>,
    pub beta: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    /// Non-silent bins.
    pub bin_count: usize,
    pub variance_floor: f64,
    pub diagnostics: EmDiagnostics,
}

impl EmState {
    pub fn real_sources(&self) -> usize {
        self.grid.sources()
    }

    pub fn has_garbage(&self) -> bool {
        self.models.len() > self.grid.sources()
    }

    /// First flattened component of each model.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.models
            .iter()
            .map(|m| {
                let o = acc;
                acc += m.candidates;
                o
            })
            .collect()
    }

    pub fn components(&self) -> usize {
        self.models.iter().map(|m| m.candidates).sum()
    }
}

pub struct EmOutput {
    /// One mask per real source, then the garbage mask if enabled.
    pub masks: Vec<SoftMask>,
    pub state: EmState,
}

/// Most probable candidate of each real source under `beta`.
pub fn argmax_candidates(state: &EmState) -> Vec<(usize, CombParams)> {
    let offsets = state.offsets();
    state
        .grid
        .candidates
        .iter()
        .enumerate()
        .map(|(l, cands)| {
            let b = &state.beta[offsets[l]..offsets[l] + cands.len()];
            let best = (0..cands.len()).fold(0, |best, c| if b[c] > b[best] { c } else { best });
            (best, cands[best])
        })
        .collect()
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

/// Read-only tables shared by every bin worker.
struct Context<'a> {
    obs: &'a InterauralObservation,
    prior: Option<&'a BinPrior>,
    bins: usize,
    frames: usize,
    /// Model owning each flattened component.
    owner: Vec<usize>,
    real_components: usize,
    n_models: usize,
    garbage: Option<usize>,
    /// `[component][bin]` model phase of real components.
    phase: Vec<f64>,
    undefined: Vec<bool>,
    ln_beta: Vec<f64>,
    ild_c0: Vec<f64>,
    ild_inv: Vec<f64>,
    ild_mean: Vec<f64>,
    ipd_c0: Vec<f64>,
    ipd_inv: Vec<f64>,
    ipd_mean: Vec<f64>,
}

impl<'a> Context<'a> {
    fn new(obs: &'a InterauralObservation, state: &EmState, prior: Option<&'a BinPrior>) -> Result<Self> {
        let bins = obs.bins();
        let frames = obs.frames();
        if let Some(p) = prior {
            p.validate(frames, bins)?;
        }
        for m in &state.models {
            if m.bins() != bins {
                return Err(Error::mismatch(bins, m.bins()));
            }
        }
        let freqs = obs.freqs_hz();
        let offsets = state.offsets();
        let total = state.components();
        let real_components = state.grid.total();
        let mut owner = Vec::with_capacity(total);
        for (l, m) in state.models.iter().enumerate() {
            owner.extend(std::iter::repeat(l).take(m.candidates));
        }
        let mut phase = vec![0.0; real_components * bins];
        let mut undefined = vec![false; real_components * bins];
        for (l, cands) in state.grid.candidates.iter().enumerate() {
            for (c, params) in cands.iter().enumerate() {
                let j = offsets[l] + c;
                let model = comb_ipd_model(params, &freqs);
                phase[j * bins..(j + 1) * bins].copy_from_slice(&model.phase);
                undefined[j * bins..(j + 1) * bins].copy_from_slice(&model.undefined);
            }
        }
        let n_models = state.models.len();
        let mut ild_c0 = vec![0.0; n_models * bins];
        let mut ild_inv = vec![0.0; n_models * bins];
        let mut ild_mean = vec![0.0; n_models * bins];
        for (l, m) in state.models.iter().enumerate() {
            for k in 0..bins {
                ild_c0[l * bins + k] = -0.5 * (2.0 * PI * m.ild_var[k]).ln();
                ild_inv[l * bins + k] = 0.5 / m.ild_var[k];
                ild_mean[l * bins + k] = m.ild_mean_db[k];
            }
        }
        let mut ipd_c0 = vec![0.0; real_components * bins];
        let mut ipd_inv = vec![0.0; real_components * bins];
        let mut ipd_mean = vec![0.0; real_components * bins];
        for (l, m) in state.models.iter().enumerate().take(state.grid.sources()) {
            for c in 0..m.candidates {
                let j = offsets[l] + c;
                for k in 0..bins {
                    let v = m.ipd_var_at(c, k);
                    ipd_c0[j * bins + k] = -0.5 * (2.0 * PI * v).ln();
                    ipd_inv[j * bins + k] = 0.5 / v;
                    ipd_mean[j * bins + k] = m.ipd_mean(c, k);
                }
            }
        }
        Ok(Self {
            obs,
            prior,
            bins,
            frames,
            owner,
            real_components,
            n_models,
            garbage: state.has_garbage().then_some(total - 1),
            phase,
            undefined,
            ln_beta: state.beta.iter().map(|b| b.ln()).collect(),
            ild_c0,
            ild_inv,
            ild_mean,
            ipd_c0,
            ipd_inv,
            ipd_mean,
        })
    }

    fn components(&self) -> usize {
        self.owner.len()
    }

    fn models(&self) -> usize {
        self.n_models
    }

    /// Wrapped IPD residual of real component `j` at (m, k).
    fn residual(&self, j: usize, m: usize, k: usize) -> f64 {
        wrap_phase(self.obs.ipd_rad[(m, k)] - self.phase[j * self.bins + k])
    }
}

/// Sufficient statistics of one frequency bin.
struct BinStats {
    s0: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    a0: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    loglik: Compensated,
    max_norm_error: f64,
    degenerate: usize,
    /// `[model][frame]` posteriors when requested; NaN on silent frames.
    mask: Option<Vec<f64>>,
    per_model: Vec<f64>,
}

impl BinStats {
    fn new(components: usize, models: usize, frames: usize, want_mask: bool) -> Self {
        Self {
            s0: vec![0.0; components],
            s1: vec![0.0; components],
            s2: vec![0.0; components],
            a0: vec![0.0; models],
            a1: vec![0.0; models],
            a2: vec![0.0; models],
            loglik: Compensated::default(),
            max_norm_error: 0.0,
            degenerate: 0,
            mask: want_mask.then(|| vec![f64::NAN; models * frames]),
            per_model: vec![0.0; models],
        }
    }

    /// Adds one non-silent bin's normalised posteriors.
    fn accumulate(&mut self, ctx: &Context, m: usize, k: usize, post: &[f64], resid: &[f64]) {
        let alpha = ctx.obs.ild_db[(m, k)];
        let per_model = &mut self.per_model;
        per_model.iter_mut().for_each(|v| *v = 0.0);
        for (j, &nu) in post.iter().enumerate() {
            self.s0[j] += nu;
            if j < ctx.real_components {
                let r = resid[j];
                self.s1[j] += nu * r;
                self.s2[j] += nu * r * r;
            }
            per_model[ctx.owner[j]] += nu;
        }
        for (l, &nu) in per_model.iter().enumerate() {
            self.a0[l] += nu;
            self.a1[l] += nu * alpha;
            self.a2[l] += nu * alpha * alpha;
            if let Some(mask) = self.mask.as_mut() {
                mask[l * ctx.frames + m] = nu;
            }
        }
    }
}

/// Normalised posteriors over all components for one (m, k); returns the
/// bin's log-likelihood, or `None` when every component has zero
/// likelihood (the posterior is then uniform).
fn posterior(
    ctx: &Context,
    m: usize,
    k: usize,
    post: &mut [f64],
    resid: &mut [f64],
    ild_ll: &mut [f64],
) -> Result<Option<f64>> {
    let bins = ctx.bins;
    let alpha = ctx.obs.ild_db[(m, k)];
    let (ln_real, ln_garbage) = match ctx.prior {
        Some(p) => (p.real[(m, k)].ln(), p.garbage[(m, k)].ln()),
        None => (0.0, 0.0),
    };
    for (l, v) in ild_ll.iter_mut().enumerate() {
        let d = alpha - ctx.ild_mean[l * bins + k];
        *v = ctx.ild_c0[l * bins + k] - d * d * ctx.ild_inv[l * bins + k];
    }
    let mut max = f64::NEG_INFINITY;
    for j in 0..ctx.components() {
        let l = ctx.owner[j];
        let ll = if Some(j) == ctx.garbage {
            ctx.ln_beta[j] + ild_ll[l] + LOG_UNIFORM_IPD + ln_garbage
        } else {
            let jk = j * bins + k;
            let ipd = if ctx.undefined[jk] {
                resid[j] = 0.0;
                LOG_UNIFORM_IPD
            } else {
                let r = ctx.residual(j, m, k);
                resid[j] = r;
                let d = r - ctx.ipd_mean[jk];
                ctx.ipd_c0[jk] - d * d * ctx.ipd_inv[jk]
            };
            ctx.ln_beta[j] + ild_ll[l] + ipd + ln_real
        };
        if ll.is_nan() {
            return Err(Error::NonFinite { iteration: 0 });
        }
        post[j] = ll;
        max = max.max(ll);
    }
    if max == f64::INFINITY {
        return Err(Error::NonFinite { iteration: 0 });
    }
    if max == f64::NEG_INFINITY {
        let u = 1.0 / post.len() as f64;
        post.iter_mut().for_each(|p| *p = u);
        return Ok(None);
    }
    let mut sum = 0.0;
    for p in post.iter_mut() {
        *p = (*p - max).exp();
        sum += *p;
    }
    let inv = 1.0 / sum;
    post.iter_mut().for_each(|p| *p *= inv);
    Ok(Some(max + sum.ln()))
}

/// E-step for one bin, feeding every non-silent frame's posterior to `visit`.
fn process_bin(
    ctx: &Context,
    k: usize,
    want_mask: bool,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<BinStats> {
    let comps = ctx.components();
    let mut stats = BinStats::new(comps, ctx.models(), ctx.frames, want_mask);
    let mut post = vec![0.0; comps];
    let mut resid = vec![0.0; comps];
    let mut ild_ll = vec![0.0; ctx.models()];
    for m in 0..ctx.frames {
        if ctx.obs.silent[(m, k)] {
            continue;
        }
        match posterior(ctx, m, k, &mut post, &mut resid, &mut ild_ll)? {
            Some(ll) => stats.loglik.add(ll),
            None => stats.degenerate += 1,
        }
        let err = (post.iter().sum::<f64>() - 1.0).abs();
        stats.max_norm_error = stats.max_norm_error.max(err);
        stats.accumulate(ctx, m, k, &post, &resid);
        visit(m, &post);
    }
    Ok(stats)
}

/// Everything the M-step and the diagnostics need from one E-step.
struct Sweep {
    bins: Vec<BinStats>,
    loglik: f64,
    max_norm_error: f64,
    degenerate: usize,
}

fn sweep(ctx: &Context, want_mask: bool) -> Result<Sweep> {
    let bins: Vec<BinStats> = (0..ctx.bins)
        .into_par_iter()
        .map(|k| process_bin(ctx, k, want_mask, |_, _| {}))
        .collect::<Result<_>>()?;
    Ok(summarise(bins))
}

/// Reduces per-bin results in bin order so the outcome does not depend on
/// the thread count.
fn summarise(bins: Vec<BinStats>) -> Sweep {
    let mut ll = Compensated::default();
    let mut max_norm_error: f64 = 0.0;
    let mut degenerate = 0;
    for b in &bins {
        ll.add(b.loglik.value());
        max_norm_error = max_norm_error.max(b.max_norm_error);
        degenerate += b.degenerate;
    }
    Sweep {
        bins,
        loglik: ll.value(),
        max_norm_error,
        degenerate,
    }
}

/// Closed-form parameter updates from the per-bin statistics.
fn update(state: &EmState, sweep: &Sweep) -> Result<EmState> {
    let mut next = state.clone();
    let floor = state.variance_floor;
    let offsets = state.offsets();
    let bins = sweep.bins.len();
    let n_real = state.real_sources();
    let tiny = f64::MIN_POSITIVE;
    let mut frozen = 0;
    for (l, model) in next.models.iter_mut().enumerate() {
        for (k, st) in sweep.bins.iter().enumerate() {
            let w = st.a0[l];
            if w > tiny {
                let mean = st.a1[l] / w;
                model.ild_mean_db[k] = mean;
                model.ild_var[k] = (st.a2[l] / w - mean * mean).max(floor);
            } else {
                frozen += 1;
            }
            if l < n_real {
                for c in 0..model.candidates {
                    let j = offsets[l] + c;
                    let w = st.s0[j];
                    if w > tiny {
                        let mean = st.s1[j] / w;
                        model.ipd_mean_rad[c * bins + k] = mean;
                        model.ipd_var[c * bins + k] = (st.s2[j] / w - mean * mean).max(floor);
                    } else {
                        frozen += 1;
                    }
                }
            }
        }
    }
    let b = state.bin_count as f64;
    for (j, beta) in next.beta.iter_mut().enumerate() {
        let mut acc = Compensated::default();
        for st in &sweep.bins {
            acc.add(st.s0[j]);
        }
        *beta = acc.value() / b;
    }
    // renormalise away rounding so the weights sum to one
    let total: f64 = next.beta.iter().sum();
    next.beta.iter_mut().for_each(|v| *v /= total);
    next.diagnostics.frozen.push(frozen);
    Ok(next)
}

/// Posterior occupations of every component, stored in full.
#[derive(Debug, Clone)]
pub struct Occupation {
    /// One grid per flattened component; zero on silent bins.
    pub nu: Vec<TfGrid<f64>>,
    pub loglik: f64,
    pub degenerate_bins: usize,
    pub max_norm_error: f64,
}

/// Initial models: ILD prior means with the configured variance, zero-mean
/// IPD residuals, and weights split evenly over sources, then candidates.
pub fn initial_state(obs: &InterauralObservation, init: &[SourceInit], config: &EmConfig) -> Result<EmState> {
    config.validate()?;
    let bins = obs.bins();
    let combs: Vec<CombParams> = init.iter().map(|s| s.comb).collect();
    let grid = build_param_grid(&combs, config.range_s, config.grid_steps, config.variant.uses_reflection())?;
    let mut models = Vec::with_capacity(init.len() + 1);
    for (s, cands) in init.iter().zip(&grid.candidates) {
        if s.ild_mean_db.len() != bins {
            return Err(Error::mismatch(bins, s.ild_mean_db.len()));
        }
        models.push(SourceCueModel::new(
            s.ild_mean_db.clone(),
            vec![config.init_ild_var; bins],
            cands.len(),
            config.init_ipd_var,
        )?);
    }
    if config.garbage {
        models.push(garbage_model(bins));
    }
    let share = 1.0 / models.len() as f64;
    let beta = models
        .iter()
        .flat_map(|m| std::iter::repeat(share / m.candidates as f64).take(m.candidates))
        .collect();
    let bin_count = obs.active_count();
    if bin_count == 0 {
        return Err(Error::Silent);
    }
    Ok(EmState {
        grid,
        models,
        beta,
        loglik_trace: Vec::new(),
        bin_count,
        variance_floor: config.variance_floor,
        diagnostics: EmDiagnostics::default(),
    })
}

pub fn e_step(obs: &InterauralObservation, state: &EmState, prior: Option<&BinPrior>) -> Result<Occupation> {
    let ctx = Context::new(obs, state, prior)?;
    let (frames, bins) = (ctx.frames, ctx.bins);
    let comps = ctx.components();
    let mut nu = vec![TfGrid::filled(frames, bins, 0.0); comps];
    let mut all = Vec::with_capacity(bins);
    for k in 0..bins {
        let st = process_bin(&ctx, k, false, |m, post| {
            for (j, p) in post.iter().enumerate() {
                nu[j][(m, k)] = *p;
            }
        })?;
        all.push(st);
    }
    let s = summarise(all);
    Ok(Occupation {
        nu,
        loglik: s.loglik,
        degenerate_bins: s.degenerate,
        max_norm_error: s.max_norm_error,
    })
}

pub fn m_step(obs: &InterauralObservation, occ: &Occupation, state: &EmState) -> Result<EmState> {
    let ctx = Context::new(obs, state, None)?;
    let comps = ctx.components();
    if occ.nu.len() != comps {
        return Err(Error::mismatch(comps, occ.nu.len()));
    }
    let mut all = Vec::with_capacity(ctx.bins);
    let mut post = vec![0.0; comps];
    let mut resid = vec![0.0; comps];
    for k in 0..ctx.bins {
        let mut st = BinStats::new(comps, ctx.models(), ctx.frames, false);
        for m in 0..ctx.frames {
            if obs.silent[(m, k)] {
                continue;
            }
            for j in 0..comps {
                post[j] = occ.nu[j][(m, k)];
                resid[j] = if j < ctx.real_components && !ctx.undefined[j * ctx.bins + k] {
                    ctx.residual(j, m, k)
                } else {
                    0.0
                };
            }
            st.accumulate(&ctx, m, k, &post, &resid);
        }
        all.push(st);
    }
    update(state, &summarise(all))
}

fn masks_from(sweep: &Sweep, state: &EmState, frames: usize) -> Vec<SoftMask> {
    let bins = sweep.bins.len();
    let n_real = state.real_sources();
    let offsets = state.offsets();
    (0..state.models.len())
        .map(|l| {
            // silent bins take the source's overall weight
            let fallback: f64 = state.beta[offsets[l]..offsets[l] + state.models[l].candidates].iter().sum();
            let mut values = TfGrid::filled(frames, bins, fallback);
            for (k, st) in sweep.bins.iter().enumerate() {
                let mask = st.mask.as_ref().expect("mask requested");
                for m in 0..frames {
                    let v = mask[l * frames + m];
                    if !v.is_nan() {
                        values[(m, k)] = v;
                    }
                }
            }
            SoftMask {
                source_id: l,
                values,
                emitting: l < n_real,
            }
        })
        .collect()
}

/// Alternates E- and M-steps `max_iters` times. Masks come from the last
/// E-step; the returned state includes the final M-step.
pub fn run_em(
    obs: &InterauralObservation,
    init: &[SourceInit],
    config: &EmConfig,
    prior: Option<&BinPrior>,
) -> Result<EmOutput> {
    if config.variant.uses_ic() != prior.is_some() {
        return Err(Error::invalid(format!(
            "method {} {} a coherence prior",
            config.variant,
            if config.variant.uses_ic() { "needs" } else { "does not take" }
        )));
    }
    let mut state = initial_state(obs, init, config)?;
    let mut masks = Vec::new();
    for it in 0..config.max_iters {
        let last = it + 1 == config.max_iters;
        let ctx = Context::new(obs, &state, prior)?;
        let sw = sweep(&ctx, last).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFinite { iteration: it },
            other => other,
        })?;
        if !sw.loglik.is_finite() {
            return Err(Error::NonFinite { iteration: it });
        }
        log::debug!("iteration {it}: log-likelihood {:.6}", sw.loglik);
        if last {
            masks = masks_from(&sw, &state, obs.frames());
        }
        let mut next = update(&state, &sw)?;
        next.loglik_trace.push(sw.loglik);
        next.diagnostics.max_norm_error.push(sw.max_norm_error);
        next.diagnostics.degenerate_bins.push(sw.degenerate);
        state = next;
    }
    Ok(EmOutput { masks, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustics::{direct_path_reference, synthesize_brir, Brir, HeadGeometry, Reflector, RoomSpec, Vec3};
    use crate::dsp::StftParams;
    use crate::em::Variant;
    use crate::mixture::{observe, MixtureScene, render_mixture};
    use crate::models::{ic_mask, ild_model_ir, log_gaussian, IcMask};
    use crate::speech::synthetic_utterance;
    use crate::testutil::toy_observation;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(variant: Variant, iters: usize) -> EmConfig {
        EmConfig {
            variant,
            max_iters: iters,
            ..EmConfig::default()
        }
    }

    fn flat_init(bins: usize, n_ds: f64, ild: f64) -> SourceInit {
        SourceInit {
            comb: CombParams::direct_only(n_ds),
            ild_mean_db: vec![ild; bins],
        }
    }

    fn truth(brir: &Brir) -> CombParams {
        let d = [brir.direct_tap(0).unwrap(), brir.direct_tap(1).unwrap()];
        let r = [brir.first_reflection(0).unwrap(), brir.first_reflection(1).unwrap()];
        CombParams {
            n_ds_s: d[1].toa_s - d[0].toa_s,
            n_df_s: r[0].toa_s - d[0].toa_s,
            n_st_s: r[1].toa_s - r[0].toa_s,
            p01: d[0].amplitude,
            p11: r[0].amplitude,
            p02: d[1].amplitude,
            p12: r[1].amplitude,
        }
    }

    struct Scene {
        obs: InterauralObservation,
        init: Vec<SourceInit>,
        ic: IcMask,
    }

    fn scene(azimuths: &[f64], rt60: f64, seed: u64, secs: f64) -> Scene {
        let fs = 16_000.0;
        let head = HeadGeometry::default();
        let room = RoomSpec {
            reflectors: vec![Reflector::floor(0.8)],
            rt60_s: rt60,
            noise_seed: seed,
            ..RoomSpec::anechoic()
        };
        let params = StftParams::default();
        let mut sources = Vec::new();
        let mut init = Vec::new();
        for (i, az) in azimuths.iter().enumerate() {
            let src = Vec3::polar(head.center, 2.0, az.to_radians());
            let brir = synthesize_brir(&room, src, &head, fs).unwrap();
            let freqs = crate::dsp::bin_frequencies(&params, fs);
            let ild = ild_model_ir(&direct_path_reference(&brir, 5.0).unwrap(), &freqs).ild_db;
            init.push(SourceInit {
                comb: truth(&brir),
                ild_mean_db: ild,
            });
            sources.push((synthetic_utterance(seed * 10 + i as u64, secs, fs).unwrap(), brir));
        }
        let mix = MixtureScene {
            sources,
            tir_db: 0.0,
            snr_db: None,
            seed,
        };
        let (l, r) = render_mixture(&mix).unwrap();
        let obs = observe(&l, &r, &params).unwrap();
        let ic = ic_mask(&obs.left_spec, &obs.right_spec, 0.5).unwrap();
        Scene { obs, init, ic }
    }

    #[test]
    fn single_component_posterior_is_one() {
        let obs = toy_observation(&[1.0, -2.0, 3.0], &[0.1, 0.5, -1.0]);
        let mut cfg = config(Variant::Messl, 1);
        cfg.garbage = false;
        cfg.grid_steps = [1, 1, 1];
        let st = initial_state(&obs, &[flat_init(obs.bins(), 0.0, 0.0)], &cfg).unwrap();
        let occ = e_step(&obs, &st, None).unwrap();
        assert_eq!(occ.nu.len(), 1);
        assert!(occ.nu[0].as_slice().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn identical_sources_split_evenly() {
        let obs = toy_observation(&[1.0, -2.0, 3.0], &[0.1, 0.5, -1.0]);
        let mut cfg = config(Variant::Messl, 1);
        cfg.garbage = false;
        cfg.grid_steps = [1, 1, 1];
        let s = flat_init(obs.bins(), 1e-4, 0.5);
        let st = initial_state(&obs, &[s.clone(), s], &cfg).unwrap();
        let occ = e_step(&obs, &st, None).unwrap();
        for j in 0..2 {
            assert!(occ.nu[j].as_slice().iter().all(|v| (v - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn posterior_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ild: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let ipd: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let obs = toy_observation(&ild, &ipd);
        let bins = obs.bins();
        let mut cfg = config(Variant::IcMessl, 1);
        cfg.grid_steps = [3, 1, 1];
        cfg.range_s = 2e-4;
        let init = [flat_init(bins, 1e-4, 2.0), flat_init(bins, -3e-4, -4.0)];
        let mut st = initial_state(&obs, &init, &cfg).unwrap();
        for m in st.models.iter_mut() {
            m.ild_var.iter_mut().for_each(|v| *v = rng.gen_range(1.0..20.0));
            if !m.is_garbage {
                m.ipd_mean_rad.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
                m.ipd_var.iter_mut().for_each(|v| *v = rng.gen_range(0.1..2.0));
            }
        }
        let raw: Vec<f64> = (0..st.beta.len()).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        st.beta = raw.iter().map(|v| v / total).collect();
        let gamma = TfGrid::from_fn(obs.frames(), bins, |_, _| rng.gen_range(0.05..0.95));
        let prior = BinPrior::from_ic(&IcMask { gamma: gamma.clone(), kappa: 0.5 });
        let occ = e_step(&obs, &st, Some(&prior)).unwrap();

        let pdf = |x: f64, mu: f64, v: f64| (-(x - mu).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
        let freqs = obs.freqs_hz();
        for m in 0..obs.frames() {
            for k in 0..bins {
                let mut w = Vec::new();
                for (l, cands) in st.grid.candidates.iter().enumerate() {
                    let model = &st.models[l];
                    for (c, params) in cands.iter().enumerate() {
                        let j = st.offsets()[l] + c;
                        let model_phase = (2.0 * PI * freqs[k] * params.n_ds_s + PI).rem_euclid(2.0 * PI) - PI;
                        let r = (obs.ipd_rad[(m, k)] - model_phase + PI).rem_euclid(2.0 * PI) - PI;
                        w.push(
                            st.beta[j]
                                * pdf(obs.ild_db[(m, k)], model.ild_mean_db[k], model.ild_var[k])
                                * pdf(r, model.ipd_mean(c, k), model.ipd_var_at(c, k))
                                * gamma[(m, k)],
                        );
                    }
                }
                let g = &st.models[2];
                w.push(
                    st.beta[st.beta.len() - 1]
                        * pdf(obs.ild_db[(m, k)], g.ild_mean_db[k], g.ild_var[k])
                        / (2.0 * PI)
                        * (1.0 - gamma[(m, k)]),
                );
                let z: f64 = w.iter().sum();
                for (j, wj) in w.iter().enumerate() {
                    assert!((occ.nu[j][(m, k)] - wj / z).abs() < 1e-12, "m={m} k={k} j={j}");
                }
            }
        }
    }

    #[test]
    fn m_step_degenerate_and_two_point_moments() {
        let mut cfg = config(Variant::Messl, 1);
        cfg.garbage = false;
        cfg.grid_steps = [1, 1, 1];
        let obs = toy_observation(&[3.0], &[0.2]);
        let st = initial_state(&obs, &[flat_init(obs.bins(), 0.0, 0.0)], &cfg).unwrap();
        let occ = e_step(&obs, &st, None).unwrap();
        let next = m_step(&obs, &occ, &st).unwrap();
        assert!(next.models[0].ild_mean_db.iter().all(|v| (v - 3.0).abs() < 1e-12));
        assert!(next.models[0].ild_var.iter().all(|v| *v == VARIANCE_FLOOR_TEST));
        assert_eq!(next.beta, vec![1.0]);

        // two frames per bin with ILD 0 and 2: the toy grid has odd frames, so
        // use explicit occupations on a hand-made subset
        let obs = toy_observation(&[0.0, 2.0], &[0.0]);
        let mut occ = e_step(&obs, &st, None).unwrap();
        let mut obs2 = obs.clone();
        let bins = obs.bins();
        for m in 2..obs.frames() {
            for k in 0..bins {
                obs2.silent[(m, k)] = true;
                occ.nu[0][(m, k)] = 0.0;
            }
        }
        for k in 0..bins {
            obs2.ild_db[(0, k)] = 0.0;
            obs2.ild_db[(1, k)] = 2.0;
        }
        let next = m_step(&obs2, &occ, &st).unwrap();
        assert!(next.models[0].ild_mean_db.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(next.models[0].ild_var.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    const VARIANCE_FLOOR_TEST: f64 = crate::models::VARIANCE_FLOOR;

    #[test]
    fn m_step_matches_brute_force_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ild: Vec<f64> = (0..35).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let ipd: Vec<f64> = (0..35).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let obs = toy_observation(&ild, &ipd);
        let bins = obs.bins();
        let mut cfg = config(Variant::ErMessl, 1);
        cfg.grid_steps = [3, 1, 3];
        let mut init = flat_init(bins, 1e-4, 1.0);
        init.comb.n_df_s = 3e-3;
        init.comb.p11 = 0.4;
        init.comb.p12 = 0.3;
        let st = initial_state(&obs, &[init, flat_init(bins, -2e-4, -1.0)], &cfg).unwrap();
        let mut occ = e_step(&obs, &st, None).unwrap();
        // replace with random normalised occupations
        let comps = occ.nu.len();
        for m in 0..obs.frames() {
            for k in 0..bins {
                let w: Vec<f64> = (0..comps).map(|_| rng.gen_range(0.0..1.0)).collect();
                let z: f64 = w.iter().sum();
                for j in 0..comps {
                    occ.nu[j][(m, k)] = w[j] / z;
                }
            }
        }
        let next = m_step(&obs, &occ, &st).unwrap();
        let offsets = st.offsets();
        let freqs = obs.freqs_hz();
        for l in 0..st.models.len() {
            let cands = st.models[l].candidates;
            for k in 0..bins {
                let (mut w, mut s1, mut s2) = (0.0, 0.0, 0.0);
                for m in 0..obs.frames() {
                    let nu: f64 = (0..cands).map(|c| occ.nu[offsets[l] + c][(m, k)]).sum();
                    let a = obs.ild_db[(m, k)];
                    w += nu;
                    s1 += nu * a;
                    s2 += nu * a * a;
                }
                let mu = s1 / w;
                assert!((next.models[l].ild_mean_db[k] - mu).abs() < 1e-10);
                assert!((next.models[l].ild_var[k] - (s2 / w - mu * mu).max(VARIANCE_FLOOR_TEST)).abs() < 1e-10);
                if l == 2 {
                    continue;
                }
                for c in 0..cands {
                    let j = offsets[l] + c;
                    let phase = crate::models::comb_phase_at(&st.grid.candidates[l][c], freqs[k]).unwrap();
                    let (mut w, mut s1, mut s2) = (0.0, 0.0, 0.0);
                    for m in 0..obs.frames() {
                        let r = crate::dsp::wrap_phase(obs.ipd_rad[(m, k)] - phase);
                        let nu = occ.nu[j][(m, k)];
                        w += nu;
                        s1 += nu * r;
                        s2 += nu * r * r;
                    }
                    let mu = s1 / w;
                    assert!((next.models[l].ipd_mean(c, k) - mu).abs() < 1e-10);
                    assert!((next.models[l].ipd_var_at(c, k) - (s2 / w - mu * mu).max(VARIANCE_FLOOR_TEST)).abs() < 1e-10);
                }
            }
        }
        let total = (obs.frames() * bins) as f64;
        for j in 0..comps {
            let expect: f64 = occ.nu[j].as_slice().iter().sum::<f64>() / total;
            assert!((next.beta[j] - expect).abs() < 1e-12);
        }
        assert!((next.beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_occupation_freezes_parameters() {
        let obs = toy_observation(&[1.0, 2.0], &[0.3]);
        let mut cfg = config(Variant::Messl, 1);
        cfg.garbage = false;
        cfg.grid_steps = [1, 1, 1];
        let bins = obs.bins();
        let st = initial_state(&obs, &[flat_init(bins, 0.0, 0.0), flat_init(bins, 0.0, 7.0)], &cfg).unwrap();
        let mut occ = e_step(&obs, &st, None).unwrap();
        occ.nu[0].as_mut_slice().iter_mut().for_each(|v| *v = 1.0);
        occ.nu[1].as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        let next = m_step(&obs, &occ, &st).unwrap();
        assert_eq!(next.models[1], st.models[1]);
        assert_eq!(next.beta[1], 0.0);
        assert_eq!(next.diagnostics.frozen, vec![2 * bins]);
    }

    #[test]
    fn fused_and_materialised_steps_agree() {
        let sc = scene(&[30.0, -40.0], 0.2, 3, 1.0);
        let cfg = config(Variant::EricMessl, 1);
        let prior = BinPrior::from_ic(&sc.ic);
        let fused = run_em(&sc.obs, &sc.init, &cfg, Some(&prior)).unwrap();
        let st = initial_state(&sc.obs, &sc.init, &cfg).unwrap();
        let occ = e_step(&sc.obs, &st, Some(&prior)).unwrap();
        let next = m_step(&sc.obs, &occ, &st).unwrap();
        assert!((fused.state.loglik_trace[0] - occ.loglik).abs() < 1e-9 * occ.loglik.abs());
        for (a, b) in fused.state.beta.iter().zip(&next.beta) {
            assert!((a - b).abs() < 1e-12);
        }
        for (ma, mb) in fused.state.models.iter().zip(&next.models) {
            for (a, b) in ma.ipd_mean_rad.iter().zip(&mb.ipd_mean_rad) {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in ma.ild_var.iter().zip(&mb.ild_var) {
                assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
            }
        }
        // one iteration: masks are the initial posteriors
        let offsets = st.offsets();
        for (l, mask) in fused.masks.iter().enumerate() {
            for m in 0..sc.obs.frames() {
                for k in 0..sc.obs.bins() {
                    if sc.obs.silent[(m, k)] {
                        continue;
                    }
                    let p: f64 = (0..st.models[l].candidates).map(|c| occ.nu[offsets[l] + c][(m, k)]).sum();
                    assert!((mask.values[(m, k)] - p).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_source_exact_init_claims_active_bins() {
        let sc = scene(&[35.0], 0.0, 4, 1.5);
        let out = run_em(&sc.obs, &sc.init, &config(Variant::ErMessl, 8), None).unwrap();
        let trace = &out.state.loglik_trace;
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "{trace:?}");
        }
        let power = sc.obs.left_spec.power();
        let peak = power.as_slice().iter().cloned().fold(0.0, f64::max);
        let mut claimed = Vec::new();
        for (i, p) in power.as_slice().iter().enumerate() {
            if *p > peak * 1e-3 {
                claimed.push(out.masks[0].values.as_slice()[i]);
            }
        }
        claimed.sort_by(f64::total_cmp);
        let frac = claimed.iter().filter(|v| **v >= 0.99).count() as f64 / claimed.len() as f64;
        assert!(frac > 0.9, "{frac}");
    }

    #[test]
    fn ic_variant_with_unit_prior_equals_messl() {
        let sc = scene(&[30.0, -30.0], 0.25, 5, 1.0);
        let messl = run_em(&sc.obs, &sc.init, &config(Variant::Messl, 4), None).unwrap();
        let unit = BinPrior::uniform(sc.obs.frames(), sc.obs.bins());
        let ic = run_em(&sc.obs, &sc.init, &config(Variant::IcMessl, 4), Some(&unit)).unwrap();
        assert_eq!(messl.state.loglik_trace, ic.state.loglik_trace);
        assert_eq!(messl.state.beta, ic.state.beta);
        for (a, b) in messl.masks.iter().zip(&ic.masks) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn reflection_variant_without_reflection_equals_messl() {
        let mut sc = scene(&[30.0, -30.0], 0.25, 6, 1.0);
        for s in sc.init.iter_mut() {
            s.comb = s.comb.without_reflection();
        }
        let messl = run_em(&sc.obs, &sc.init, &config(Variant::Messl, 3), None).unwrap();
        let mut cfg = config(Variant::ErMessl, 3);
        cfg.grid_steps = [5, 1, 1];
        let er = run_em(&sc.obs, &sc.init, &cfg, None).unwrap();
        assert_eq!(messl.state.grid, er.state.grid);
        assert_eq!(messl.state.loglik_trace, er.state.loglik_trace);
        for (a, b) in messl.masks.iter().zip(&er.masks) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let sc = scene(&[20.0, -50.0], 0.3, 7, 0.8);
        let prior = BinPrior::from_ic(&sc.ic);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_em(&sc.obs, &sc.init, &config(Variant::EricMessl, 3), Some(&prior)).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.state.loglik_trace, b.state.loglik_trace);
        assert_eq!(a.state.beta, b.state.beta);
        assert_eq!(a.masks[0].values, b.masks[0].values);
    }

    #[test]
    fn prior_must_match_variant() {
        let sc = scene(&[30.0], 0.0, 1, 0.5);
        assert!(run_em(&sc.obs, &sc.init, &config(Variant::EricMessl, 1), None).is_err());
        let unit = BinPrior::uniform(sc.obs.frames(), sc.obs.bins());
        assert!(run_em(&sc.obs, &sc.init, &config(Variant::Messl, 1), Some(&unit)).is_err());
    }

    #[test]
    fn non_finite_observation_aborts_with_iteration() {
        let mut obs = toy_observation(&[1.0], &[0.1]);
        obs.ild_db[(2, 2)] = f64::NAN;
        let cfg = config(Variant::Messl, 2);
        let r = run_em(&obs, &[flat_init(obs.bins(), 0.0, 0.0)], &cfg, None);
        assert!(matches!(r, Err(Error::NonFinite { iteration: 0 })), "{:?}", r.err());
    }

    #[test]
    fn gaussian_helper_consistent_with_kernel_constants() {
        let v: f64 = 0.37;
        let c0 = -0.5 * (2.0 * PI * v).ln();
        assert!((c0 - 0.25 * 0.25 * (0.5 / v) - log_gaussian(0.25, 0.0, v)).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn em_invariants_hold(seed in 0u64..500, az in 20.0f64..70.0, ic in any::<bool>()) {
            let sc = scene(&[az, -az + 10.0], 0.3, seed, 0.6);
            let variant = if ic { Variant::EricMessl } else { Variant::ErMessl };
            let prior = BinPrior::from_ic(&sc.ic);
            let out = run_em(&sc.obs, &sc.init, &config(variant, 6), ic.then_some(&prior)).unwrap();
            let st = &out.state;
            for w in st.loglik_trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-6, "{:?}", st.loglik_trace);
            }
            prop_assert!((st.beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(st.diagnostics.max_norm_error.iter().all(|e| *e < 1e-9));
            for m in 0..sc.obs.frames() {
                for k in 0..sc.obs.bins() {
                    let s: f64 = out.masks.iter().map(|mk| mk.values[(m, k)]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
