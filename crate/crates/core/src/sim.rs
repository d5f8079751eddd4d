//! Seeded generators for the simulated experiment families.
//!
//! Every subject draws from its own ChaCha20 stream keyed by the dataset
//! seed and the subject index, and always consumes the same number of
//! variates whatever the parameter values. Datasets are therefore identical
//! across thread schedules, and switching one component off leaves the
//! draws of the others untouched.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::basis::{absorb_intercept, build_basis, BasisSpec, PenaltyOrder};
use crate::data::{Between, LatentTruth, LongDataset, Row, Within};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Design {
    Blocked,
    Randomized,
}

/// The time-varying component of the generating model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeEffect {
    None,
    /// `alpha_i sin(t)` with `alpha_i ~ N(0, sigma_alpha)`, optionally folded
    /// to its absolute value.
    Amplitude {
        sigma_alpha: f64,
        abs: bool,
    },
    /// `alpha sin(t - phi_i)` with `phi_i ~ N(0, sigma_phi)`.
    Phase {
        alpha: f64,
        sigma_phi: f64,
    },
    /// `sum_j w_ij f_j(t)` over `k_gen` centered basis functions with
    /// `w_ij ~ N(0, sigma_tprs)`.
    Wiggly {
        sigma_tprs: f64,
        k_gen: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub n_subjects: usize,
    pub n_trials: usize,
    pub t_domain: (f64, f64),
    pub beta: f64,
    pub beta_w: f64,
    pub beta_b: f64,
    pub beta_bw: f64,
    pub sigma: f64,
    pub sigma_b: f64,
    pub sigma_bw: f64,
    pub effect: TimeEffect,
    pub design: Design,
    pub counterbalanced: bool,
    pub seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            n_subjects: 40,
            n_trials: 100,
            t_domain: (0.0, 2.0 * PI),
            beta: 0.0,
            beta_w: 0.0,
            beta_b: 0.0,
            beta_bw: 0.0,
            sigma: 10.0,
            sigma_b: 1.0,
            sigma_bw: 0.0,
            effect: TimeEffect::None,
            design: Design::Blocked,
            counterbalanced: true,
            seed: 1,
        }
    }
}

impl SimParams {
    /// Varying-amplitude sines with normal amplitudes, blocked design.
    pub fn amp() -> Self {
        SimParams {
            beta_w: 2.0,
            beta_b: 2.0,
            effect: TimeEffect::Amplitude {
                sigma_alpha: 32.0,
                abs: false,
            },
            ..Default::default()
        }
    }

    /// As [`amp`](Self::amp) with absolute amplitudes.
    pub fn ampabs() -> Self {
        SimParams {
            effect: TimeEffect::Amplitude {
                sigma_alpha: 32.0,
                abs: true,
            },
            ..Self::amp()
        }
    }

    /// Power setting for absolute-amplitude sines.
    pub fn amp_power() -> Self {
        SimParams {
            beta_w: 2.0,
            beta_b: 1.0,
            effect: TimeEffect::Amplitude {
                sigma_alpha: 8.0,
                abs: true,
            },
            ..Default::default()
        }
    }

    /// Varying-phase sines of fixed amplitude, blocked design.
    pub fn phase() -> Self {
        SimParams {
            beta_w: 2.0,
            beta_b: 2.0,
            sigma: 8.0,
            effect: TimeEffect::Phase {
                alpha: 8.0,
                sigma_phi: 2.0,
            },
            ..Default::default()
        }
    }

    /// Varying-phase sines with an interaction and random treatment slopes,
    /// randomized design.
    pub fn phase_power() -> Self {
        SimParams {
            beta_w: 2.0,
            beta_b: 2.0,
            beta_bw: -3.0,
            sigma: 16.0,
            sigma_b: 1.0,
            sigma_bw: 1.0,
            effect: TimeEffect::Phase {
                alpha: 8.0,
                sigma_phi: 2.0,
            },
            design: Design::Randomized,
            ..Default::default()
        }
    }

    /// Random wiggly curves, randomized design.
    pub fn wiggly_power() -> Self {
        SimParams {
            beta_w: 1.0,
            beta_b: 2.0,
            beta_bw: -3.0,
            sigma: 10.0,
            sigma_b: 4.0,
            sigma_bw: 2.0,
            effect: TimeEffect::Wiggly {
                sigma_tprs: 2.0,
                k_gen: 10,
            },
            design: Design::Randomized,
            ..Default::default()
        }
    }

    /// Same parameters with every treatment effect set to zero.
    pub fn nulled(&self) -> Self {
        SimParams {
            beta_w: 0.0,
            beta_b: 0.0,
            beta_bw: 0.0,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SimParams {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let perr = |m: String| Err(Error::Parameter(m));
        if self.n_subjects == 0 || self.n_trials < 2 {
            return perr("need at least one subject and two trials".into());
        }
        if self.n_trials % 2 != 0 {
            return perr(format!(
                "n_trials = {} must be even for a balanced within-subject design",
                self.n_trials
            ));
        }
        if self.counterbalanced && self.n_subjects % 2 != 0 {
            return perr(format!(
                "n_subjects = {} must be even when counterbalanced",
                self.n_subjects
            ));
        }
        let (lo, hi) = self.t_domain;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return perr(format!("invalid time domain [{lo}, {hi}]"));
        }
        let mut sds = vec![
            ("sigma", self.sigma),
            ("sigma_b", self.sigma_b),
            ("sigma_bw", self.sigma_bw),
        ];
        match self.effect {
            TimeEffect::None => {}
            TimeEffect::Amplitude { sigma_alpha, .. } => sds.push(("sigma_alpha", sigma_alpha)),
            TimeEffect::Phase { alpha, sigma_phi } => {
                sds.push(("sigma_phi", sigma_phi));
                if !alpha.is_finite() {
                    return perr("alpha must be finite".into());
                }
            }
            TimeEffect::Wiggly { sigma_tprs, k_gen } => {
                sds.push(("sigma_tprs", sigma_tprs));
                if k_gen < 3 {
                    return perr(format!("k_gen = {k_gen} must be at least 3"));
                }
                if k_gen + 1 > self.n_trials {
                    return perr(format!(
                        "k_gen = {k_gen} needs more than {} trials",
                        self.n_trials
                    ));
                }
            }
        }
        for (name, v) in sds {
            if !(v >= 0.0 && v.is_finite()) {
                return perr(format!("{name} = {v} must be a finite nonnegative sd"));
            }
        }
        for (name, v) in [
            ("beta", self.beta),
            ("beta_w", self.beta_w),
            ("beta_b", self.beta_b),
            ("beta_bw", self.beta_bw),
        ] {
            if !v.is_finite() {
                return perr(format!("{name} must be finite"));
            }
        }
        Ok(())
    }

    /// Trial times: `n_trials` equally spaced points spanning the domain.
    pub fn times(&self) -> Vec<f64> {
        let (lo, hi) = self.t_domain;
        let n = self.n_trials;
        (0..n)
            .map(|i| {
                // Endpoints land exactly on the domain bounds.
                let f = i as f64 / (n - 1) as f64;
                lo * (1.0 - f) + hi * f
            })
            .collect()
    }
}

/// Per-subject draws behind a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDraw {
    pub subject: u32,
    pub between: Between,
    pub intercept: f64,
    pub slope_w: f64,
    pub alpha: f64,
    pub phi: f64,
    pub weights: Vec<f64>,
    pub schedule: Vec<Within>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub data: LongDataset,
    pub subjects: Vec<SubjectDraw>,
}

/// Between-subject levels and within-subject schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignAssignment {
    pub between: Vec<Between>,
    pub schedule: Vec<Vec<Within>>,
}

fn subject_rng(seed: u64, subject: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64);
    rng
}

/// Seed for replicate `r` of a study with base seed `base`.
pub fn derive_seed(base: u64, r: u64) -> u64 {
    splitmix64(base ^ splitmix64(r.wrapping_add(0x6a09_e667_f3bc_c909)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn block_schedule(n_trials: usize, b_first: bool) -> Vec<Within> {
    let (first, second) = if b_first {
        (Within::B, Within::A)
    } else {
        (Within::A, Within::B)
    };
    (0..n_trials)
        .map(|t| if t < n_trials / 2 { first } else { second })
        .collect()
}

/// Between-subject levels and per-subject within schedules.
pub fn assign_design(params: &SimParams) -> Result<DesignAssignment> {
    params.validate()?;
    let n = params.n_subjects;
    let half = n / 2;
    let between: Vec<Between> = (0..n)
        .map(|s| if s < half { Between::X } else { Between::Y })
        .collect();
    let schedule = (0..n)
        .map(|s| match params.design {
            Design::Blocked => {
                // Alternate the block order within each between-subject group.
                let within_group = if s < half { s } else { s - half };
                let b_first = params.counterbalanced && within_group % 2 == 1;
                block_schedule(params.n_trials, b_first)
            }
            Design::Randomized => {
                let mut sched = block_schedule(params.n_trials, false);
                // A stream separate from the response draws.
                let mut rng = subject_rng(params.seed ^ 0x5851_f42d_4c95_7f2d, s);
                sched.shuffle(&mut rng);
                sched
            }
        })
        .collect();
    Ok(DesignAssignment { between, schedule })
}

/// Centered generator basis for wiggly curves on the trial times, with each
/// column scaled to unit root mean square.
pub fn wiggly_basis(times: &[f64], k_gen: usize) -> Result<Vec<Vec<f64>>> {
    let raw = build_basis(times, &BasisSpec::new(k_gen + 1, PenaltyOrder::Two))?;
    let c = absorb_intercept(&raw)?;
    let n = times.len() as f64;
    Ok(c.b
        .column_iter()
        .map(|col| {
            let rms = (col.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            col.iter().map(|v| v / rms).collect()
        })
        .collect())
}

/// Generate a dataset under any time effect.
pub fn simulate(params: &SimParams) -> Result<Simulated> {
    let design = assign_design(params)?;
    let times = params.times();
    let basis = match params.effect {
        TimeEffect::Wiggly { k_gen, .. } => wiggly_basis(&times, k_gen)?,
        _ => Vec::new(),
    };
    let n_weights = basis.len();
    let mut rows = Vec::with_capacity(params.n_subjects * params.n_trials);
    let mut subjects = Vec::with_capacity(params.n_subjects);
    for s in 0..params.n_subjects {
        let mut rng = subject_rng(params.seed, s);
        let mut z = || -> f64 { rng.sample(StandardNormal) };
        let intercept = params.sigma_b * z();
        let slope_w = params.sigma_bw * z();
        let amp_draw = z();
        let phi_draw = z();
        let weight_draws: Vec<f64> = (0..n_weights).map(|_| z()).collect();
        let (alpha, phi, weights) = match params.effect {
            TimeEffect::None => (0.0, 0.0, Vec::new()),
            TimeEffect::Amplitude { sigma_alpha, abs } => {
                let a = sigma_alpha * amp_draw;
                (if abs { a.abs() } else { a }, 0.0, Vec::new())
            }
            TimeEffect::Phase { alpha, sigma_phi } => (alpha, sigma_phi * phi_draw, Vec::new()),
            TimeEffect::Wiggly { sigma_tprs, .. } => (
                0.0,
                0.0,
                weight_draws.iter().map(|w| sigma_tprs * w).collect(),
            ),
        };
        let subject = (s + 1) as u32;
        let between = design.between[s];
        let schedule = &design.schedule[s];
        for (t, &time) in times.iter().enumerate() {
            let within = schedule[t];
            let is_b = within == Within::B;
            let is_y = between == Between::Y;
            let fixed = params.beta
                + if is_b { params.beta_w } else { 0.0 }
                + if is_y { params.beta_b } else { 0.0 }
                + if is_b && is_y { params.beta_bw } else { 0.0 };
            let curve = match params.effect {
                TimeEffect::None => 0.0,
                TimeEffect::Amplitude { .. } => alpha * time.sin(),
                TimeEffect::Phase { .. } => alpha * (time - phi).sin(),
                TimeEffect::Wiggly { .. } => {
                    weights.iter().zip(&basis).map(|(w, f)| w * f[t]).sum()
                }
            };
            let slope = if is_b { slope_w } else { 0.0 };
            let noise = params.sigma * z();
            rows.push(Row {
                subject,
                trial: (t + 1) as u32,
                time,
                within,
                between,
                response: fixed + intercept + slope + curve + noise,
                latent: Some(LatentTruth {
                    fixed,
                    intercept,
                    slope,
                    curve,
                    noise,
                }),
            });
        }
        subjects.push(SubjectDraw {
            subject,
            between,
            intercept,
            slope_w,
            alpha,
            phi,
            weights,
            schedule: schedule.clone(),
        });
    }
    Ok(Simulated {
        data: LongDataset::new(rows),
        subjects,
    })
}

fn require(params: &SimParams, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "{what} generator called with time effect {:?}",
            params.effect
        )))
    }
}

/// Varying-amplitude sines.
pub fn gen_amp(params: &SimParams) -> Result<LongDataset> {
    require(
        params,
        matches!(params.effect, TimeEffect::Amplitude { .. }),
        "amplitude",
    )?;
    simulate(params).map(|s| s.data)
}

/// Varying-phase sines.
pub fn gen_phase(params: &SimParams) -> Result<LongDataset> {
    require(
        params,
        matches!(params.effect, TimeEffect::Phase { .. }),
        "phase",
    )?;
    simulate(params).map(|s| s.data)
}

/// Random wiggly curves.
pub fn gen_wiggly(params: &SimParams) -> Result<LongDataset> {
    require(
        params,
        matches!(params.effect, TimeEffect::Wiggly { .. }),
        "wiggly",
    )?;
    simulate(params).map(|s| s.data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell_mean(d: &LongDataset, w: Within, b: Between) -> f64 {
        let v: Vec<f64> = d
            .rows
            .iter()
            .filter(|r| r.within == w && r.between == b)
            .map(|r| r.response)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn noiseless_cells() {
        let p = SimParams {
            beta_w: 2.0,
            beta_b: 2.0,
            sigma: 0.0,
            sigma_b: 0.0,
            effect: TimeEffect::Amplitude {
                sigma_alpha: 0.0,
                abs: false,
            },
            ..Default::default()
        };
        let d = gen_amp(&p).unwrap();
        for r in &d.rows {
            let want = match (r.within, r.between) {
                (Within::A, Between::X) => 0.0,
                (Within::B, Between::X) | (Within::A, Between::Y) => 2.0,
                (Within::B, Between::Y) => 4.0,
            };
            assert_eq!(r.response, want);
        }
    }

    #[test]
    fn amplitude_second_moment() {
        let mut total = 0.0;
        let mut count = 0.0;
        for seed in 0..50 {
            let d = gen_amp(&SimParams::amp().with_seed(seed)).unwrap();
            for s in d.subjects() {
                let c: Vec<f64> = d.subject_rows(s).map(|r| r.latent.unwrap().curve).collect();
                let m = c.iter().sum::<f64>() / c.len() as f64;
                total += c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (c.len() - 1) as f64;
                count += 1.0;
            }
        }
        let avg = total / count;
        let target = 32.0f64.powi(2) / 2.0;
        assert!((avg / target - 1.0).abs() < 0.10, "{avg} vs {target}");
    }

    #[test]
    fn absolute_amplitudes() {
        let sim = simulate(&SimParams::ampabs().with_seed(3)).unwrap();
        assert!(sim.subjects.iter().all(|s| s.alpha >= 0.0));
        for r in &sim.data.rows {
            if r.time.sin() > 0.0 {
                assert!(r.latent.unwrap().curve >= 0.0);
            }
        }
        let mut mean = 0.0;
        let mut n = 0.0;
        for seed in 0..50 {
            for s in simulate(&SimParams::ampabs().with_seed(seed))
                .unwrap()
                .subjects
            {
                mean += s.alpha;
                n += 1.0;
            }
        }
        let target = 32.0 * (2.0 / PI).sqrt();
        assert!((mean / n / target - 1.0).abs() < 0.10);
    }

    #[test]
    fn phase_curves() {
        let p = SimParams {
            effect: TimeEffect::Phase {
                alpha: 8.0,
                sigma_phi: 0.0,
            },
            ..SimParams::phase_power()
        };
        let d = gen_phase(&p).unwrap();
        let first: Vec<f64> = d.subject_rows(1).map(|r| r.latent.unwrap().curve).collect();
        for s in d.subjects() {
            let c: Vec<f64> = d.subject_rows(s).map(|r| r.latent.unwrap().curve).collect();
            assert_eq!(c, first);
        }
        let sim = simulate(&SimParams::phase_power().with_seed(11)).unwrap();
        for r in &sim.data.rows {
            let s = &sim.subjects[(r.subject - 1) as usize];
            assert_eq!(r.latent.unwrap().curve, 8.0 * (r.time - s.phi).sin());
        }
    }

    #[test]
    fn interaction_contrast_is_exact() {
        let p = SimParams {
            sigma: 0.0,
            sigma_b: 0.0,
            sigma_bw: 0.0,
            effect: TimeEffect::Phase {
                alpha: 0.0,
                sigma_phi: 2.0,
            },
            ..SimParams::phase_power()
        };
        let d = gen_phase(&p).unwrap();
        let c = cell_mean(&d, Within::B, Between::Y)
            - cell_mean(&d, Within::A, Between::Y)
            - cell_mean(&d, Within::B, Between::X)
            + cell_mean(&d, Within::A, Between::X);
        assert_eq!(c, -3.0);
    }

    #[test]
    fn wiggly_curves() {
        let p = SimParams::wiggly_power().with_seed(5);
        let d = gen_wiggly(&p).unwrap();
        assert_eq!(d.len(), 4000);
        assert_eq!(d.subjects().len(), 40);
        let curves: Vec<Vec<f64>> = d
            .subjects()
            .into_iter()
            .map(|s| d.subject_rows(s).map(|r| r.latent.unwrap().curve).collect())
            .collect();
        for c in &curves {
            let m = c.iter().sum::<f64>() / c.len() as f64;
            let top = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(m.abs() <= 1e-8 * top);
        }
        for i in 0..curves.len() {
            for j in i + 1..curves.len() {
                let diff = curves[i]
                    .iter()
                    .zip(&curves[j])
                    .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
                assert!(diff > 0.0);
            }
        }
        let flat = SimParams {
            effect: TimeEffect::Wiggly {
                sigma_tprs: 0.0,
                k_gen: 10,
            },
            ..p
        };
        assert!(gen_wiggly(&flat)
            .unwrap()
            .rows
            .iter()
            .all(|r| r.latent.unwrap().curve == 0.0));
    }

    #[test]
    fn design_counts() {
        let a = assign_design(&SimParams::default()).unwrap();
        let mut cells = std::collections::HashMap::new();
        for (b, s) in a.between.iter().zip(&a.schedule) {
            *cells.entry((*b, s[0])).or_insert(0) += 1;
        }
        assert_eq!(cells.len(), 4);
        assert!(cells.values().all(|&c| c == 10));

        let r = assign_design(&SimParams {
            design: Design::Randomized,
            ..Default::default()
        })
        .unwrap();
        for s in &r.schedule {
            assert_eq!(s.iter().filter(|w| **w == Within::A).count(), 50);
        }
        assert!(r.schedule[0] != r.schedule[1]);
    }

    #[test]
    fn blocked_schedule_tracks_sine_sign() {
        let p = SimParams::default();
        let a = assign_design(&p).unwrap();
        let sign: Vec<f64> = p.times().iter().map(|t| t.sin().signum()).collect();
        for s in &a.schedule {
            let ind: Vec<f64> = s.iter().map(|w| f64::from(*w == Within::B)).collect();
            let r = correlation(&ind, &sign);
            assert!((r.abs() - 1.0).abs() < 1e-12, "{r}");
        }
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn noise_and_intercept_moments() {
        let mut eps = Vec::new();
        let mut b = Vec::new();
        for seed in 0..20 {
            let sim = simulate(&SimParams::amp().with_seed(seed)).unwrap();
            eps.extend(sim.data.rows.iter().map(|r| r.latent.unwrap().noise));
            b.extend(sim.subjects.iter().map(|s| s.intercept));
        }
        let sd = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        assert!((sd(&eps) / 10.0 - 1.0).abs() < 0.03);
        assert!((sd(&b) - 1.0).abs() < 0.15);
    }

    #[test]
    fn wrong_mode_is_rejected() {
        assert!(matches!(
            gen_phase(&SimParams::amp()),
            Err(Error::Parameter(_))
        ));
        let odd = SimParams {
            n_subjects: 39,
            ..SimParams::amp()
        };
        assert!(matches!(gen_amp(&odd), Err(Error::Parameter(_))));
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..100).map(|r| derive_seed(42, r)).collect();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 100);
        assert_eq!(derive_seed(42, 7), s[7]);
    }
}
