//! Randomized oracle sweeps. Each returns how many instances were compared
//! or the first mismatch.

use prognosis::fusion::cox_loss;
use prognosis::survstats::concordance::concordance_counts;
use prognosis::survstats::km::chi2_1_sf;
use prognosis::survstats::{concordance_index, km_estimate, logrank_test, time_dependent_auc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Sweep = Result<usize, String>;

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

pub fn c_index(instances: usize, seed: u64) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for k in 0..instances {
        let n = rng.random_range(2..=10);
        let time = super::tied_times(n, 5, &mut rng);
        let event = super::coin_flips(n, 0.6, &mut rng);
        let risk = super::risks(n, k % 2 == 0, &mut rng);
        let counts = concordance_counts(&risk, &time, &event).map_err(|e| e.to_string())?;
        let want = super::c_index_pairs(&risk, &time, &event);
        ensure(counts == want, || format!("instance {k}: pair counts {counts:?} vs {want:?}"))?;
        match super::c_index(&risk, &time, &event) {
            Some(c) => {
                let got = concordance_index(&risk, &time, &event).map_err(|e| e.to_string())?;
                ensure(got == c, || format!("instance {k}: C {got} vs {c}"))?;
                checked += 1;
            }
            None => ensure(concordance_index(&risk, &time, &event).is_err(), || format!("instance {k}: expected an error"))?,
        }
    }
    Ok(checked)
}

pub fn horizon_auc(instances: usize, seed: u64) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for k in 0..instances {
        let n = rng.random_range(2..=10);
        let time = super::tied_times(n, 6, &mut rng);
        let event = super::coin_flips(n, 0.5, &mut rng);
        let risk = super::risks(n, k % 3 == 0, &mut rng);
        let horizon = f64::from(rng.random_range(1..=6u32)) * 0.5;
        let got = time_dependent_auc(&risk, &time, &event, horizon);
        match super::horizon_auc(&risk, &time, &event, horizon) {
            Some(a) => {
                let got = got.map_err(|e| e.to_string())?;
                ensure(got == a, || format!("instance {k}: AUC {got} vs {a}"))?;
                checked += 1;
            }
            None => ensure(got.is_err(), || format!("instance {k}: expected an error"))?,
        }
    }
    Ok(checked)
}

pub fn kaplan_meier(instances: usize, seed: u64) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..instances {
        let n = rng.random_range(1..=10);
        let time = super::tied_times(n, 5, &mut rng);
        let event = super::coin_flips(n, 0.6, &mut rng);
        let curve = km_estimate(&time, &event).map_err(|e| e.to_string())?;
        let want = super::km(&time, &event);
        ensure(curve.times.len() == want.len(), || format!("instance {k}: step count"))?;
        for (j, (t, s)) in want.into_iter().enumerate() {
            ensure(curve.times[j] == t && curve.survival[j] == s && curve.survival_at(t) == s, || {
                format!("instance {k}: step {j} ({}, {}) vs ({t}, {s})", curve.times[j], curve.survival[j])
            })?;
        }
    }
    Ok(instances)
}

pub fn logrank(instances: usize, seed: u64) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for k in 0..instances {
        let (na, nb) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let ta = super::tied_times(na, 4, &mut rng);
        let tb = super::tied_times(nb, 4, &mut rng);
        let ea = super::coin_flips(na, 0.6, &mut rng);
        let eb = super::coin_flips(nb, 0.6, &mut rng);
        let (oe, var) = super::logrank(&ta, &ea, &tb, &eb);
        match logrank_test(&ta, &ea, &tb, &eb) {
            Ok(lr) => {
                let stat = oe * oe / var;
                ensure(
                    lr.observed_minus_expected == oe && lr.statistic == stat && lr.p_value == chi2_1_sf(stat),
                    || format!("instance {k}: O−E {} vs {oe}, statistic {} vs {stat}", lr.observed_minus_expected, lr.statistic),
                )?;
                checked += 1;
            }
            Err(_) => ensure(!(var > 0.0), || format!("instance {k}: rejected with variance {var}"))?,
        }
    }
    Ok(checked)
}

/// Value and gradient against the quadratic-time definition, within `tol`.
pub fn cox(instances: usize, tol: f64, seed: u64) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for k in 0..instances {
        let n = rng.random_range(2..=10);
        let time = super::tied_times(n, 4, &mut rng);
        let event = super::coin_flips(n, 0.6, &mut rng);
        let beta = super::risks(n, false, &mut rng);
        let got = cox_loss(&beta, &time, &event).map_err(|e| e.to_string())?;
        let Some(got) = got else {
            ensure(!event.iter().any(|&e| e), || format!("instance {k}: no loss despite events"))?;
            continue;
        };
        let (value, grad) = super::cox_nll(&beta, &time, &event);
        ensure((got.value - value).abs() <= tol * value.abs().max(1.0), || format!("instance {k}: loss {} vs {value}", got.value))?;
        for (a, b) in got.grad.iter().zip(&grad) {
            ensure((a - b).abs() <= tol * (1.0 + b.abs()), || format!("instance {k}: gradient {a} vs {b}"))?;
        }
        checked += 1;
    }
    Ok(checked)
}
