use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::rng::stream;
use crate::series::{Block, SeriesLayout};

fn gamma_raw_for(gamma: f64) -> f64 {
    (gamma - VAR_FLOOR).ln()
}

fn gauss1() -> GaussianDecoder {
    GaussianDecoder {
        n: 1,
        k: 1,
        loading: vec![1.0],
        gamma_raw: vec![gamma_raw_for(1.0)],
    }
}

#[test]
fn gaussian_standard_normal_at_mean() {
    let dec = gauss1();
    let ll = gaussian_loglik(&[0.7], &[0.7], &dec, &[true]);
    assert!((ll + 0.9189385332046727).abs() < 1e-12);
    let ll = gaussian_loglik(&[1.7], &[0.7], &dec, &[true]);
    assert!((ll + 1.4189385332046727).abs() < 1e-12);
    let ll = gaussian_loglik(&[123.0], &[0.7], &dec, &[false]);
    assert_eq!(ll, 0.0);
}

fn ord1() -> OrdinalDecoder {
    OrdinalDecoder {
        k: 1,
        levels: vec![3],
        betas: vec![0.0],
        cut_raw: vec![0.0, (3.0f64.ln().exp() - 1.0).ln()], // softplus inverse of ln 3
    }
}

#[test]
fn ordinal_hand_probabilities() {
    let dec = ord1();
    let cuts = dec.cutpoints(0);
    assert!((cuts[0] - 0.0).abs() < 1e-12);
    assert!((cuts[1] - 3.0f64.ln()).abs() < 1e-12);
    let p = ordinal_probs(&[0.0], &dec, 0);
    assert!((p[0] - 0.5).abs() < 1e-12);
    assert!((p[1] - 0.25).abs() < 1e-12);
    assert!((p[2] - 0.25).abs() < 1e-12);
}

#[test]
fn ordinal_extreme_logits_concentrate_mass() {
    let dec = OrdinalDecoder {
        k: 1,
        levels: vec![4],
        betas: vec![1.0],
        cut_raw: vec![-1.0, 0.0, 0.0],
    };
    // β·z → −∞: cumulative → 1 early, mass on the first level
    let p = ordinal_probs(&[-1e4], &dec, 0);
    assert!(p[0] > 1.0 - 1e-6);
    // β·z → +∞: mass on the last level (clamped, never exactly 0)
    let p = ordinal_probs(&[1e4], &dec, 0);
    assert!(p[3] > 1.0 - 1e-6);
    assert!(p[0] >= 0.0);
}

#[test]
fn ordinal_mass_sums_to_one_and_cumulative_monotone() {
    let mut rng = stream(11, "ordinal-oracle");
    for _ in 0..200 {
        let k = 3;
        let levels = 2 + (rng.gen::<u64>() % 6) as usize;
        let dec = OrdinalDecoder {
            k,
            levels: vec![levels],
            betas: (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            cut_raw: (0..levels - 1)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let z: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let p = ordinal_probs(&z, &dec, 0);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
        let cuts = dec.cutpoints(0);
        for w in cuts.windows(2) {
            assert!(w[1] > w[0]);
        }
        let mut cum = 0.0;
        for &pi in &p {
            assert!(pi >= 0.0);
            cum += pi;
        }
        assert!(cum <= 1.0 + 1e-9);
    }
}

#[test]
fn categorical_hand_values_and_normalization() {
    let dec = CategoricalDecoder {
        k: 1,
        classes: vec![3],
        betas: vec![0.0, 0.0],
    };
    let p = categorical_probs(&[1.0], &dec, 0);
    for &pi in &p {
        assert!((pi - 1.0 / 3.0).abs() < 1e-12);
    }
    let dec = CategoricalDecoder {
        k: 1,
        classes: vec![3],
        betas: vec![2.0f64.ln(), 0.0],
    };
    let p = categorical_probs(&[1.0], &dec, 0);
    assert!((p[0] - 0.5).abs() < 1e-12);
    assert!((p[1] - 0.25).abs() < 1e-12);
    assert!((p[2] - 0.25).abs() < 1e-12);

    let mut rng = stream(3, "cat-oracle");
    for _ in 0..200 {
        let kc = 2 + (rng.gen::<u64>() % 5) as usize;
        let dec = CategoricalDecoder {
            k: 2,
            classes: vec![kc],
            betas: (0..(kc - 1) * 2)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let z = [rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)];
        let p = categorical_probs(&z, &dec, 0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn count_dec(family: CountFamily) -> CountDecoder {
    CountDecoder {
        family,
        n: 1,
        k: 1,
        gamma0: vec![0.0],
        gammas: vec![0.0],
        zero_beta0: vec![0.0],
        zero_betas: vec![0.0],
        log_phi: vec![0.0],
    }
}

#[test]
fn count_hand_values() {
    let z = [0.3];
    let ll = count_loglik(&[0.0], &z, &count_dec(CountFamily::Poisson), &[true]).unwrap();
    assert!((ll + 1.0).abs() < 1e-12);
    let ll = count_loglik(&[0.0], &z, &count_dec(CountFamily::Zip), &[true]).unwrap();
    assert!((ll - (0.5 + 0.5 * (-1.0f64).exp()).ln()).abs() < 1e-12);
    let ll = count_loglik(&[0.0], &z, &count_dec(CountFamily::NegBinomial), &[true]).unwrap();
    assert!((ll - 0.5f64.ln()).abs() < 1e-12);
    let err = count_loglik(&[-1.0], &z, &count_dec(CountFamily::Poisson), &[true]);
    assert!(matches!(err, Err(ObsError::NegativeCount(..))));
}

#[test]
fn count_masses_normalize_over_support() {
    let mut rng = stream(5, "count-oracle");
    for family in [CountFamily::Poisson, CountFamily::Zip, CountFamily::NegBinomial] {
        for _ in 0..20 {
            let mut dec = count_dec(family);
            // rates ≤ 20
            dec.gamma0 = vec![rng.gen::<f64>() * 3.0];
            dec.zero_beta0 = vec![rng.sample::<f64, _>(StandardNormal)];
            dec.log_phi = vec![rng.sample::<f64, _>(StandardNormal)];
            let z = [0.0];
            let mut total = 0.0;
            for c in 0..=1000 {
                total += count_log_mass(&dec, &z, 0, c as f64).exp();
            }
            assert!((total - 1.0).abs() < 1e-8, "{family:?}: {total}");
        }
    }
}

#[test]
fn neg_binomial_approaches_poisson_at_large_dispersion() {
    let mut dec = count_dec(CountFamily::NegBinomial);
    dec.log_phi = vec![1e6f64.ln()];
    let nb = count_log_mass(&dec, &[0.0], 0, 2.0);
    let pois = count_log_mass(&count_dec(CountFamily::Poisson), &[0.0], 0, 2.0);
    assert!((nb - pois).abs() < 1e-4, "nb {nb} pois {pois}");
}

#[test]
fn discrete_logliks_are_nonpositive() {
    let mut rng = stream(17, "nonpos");
    for _ in 0..50 {
        let z = [rng.sample::<f64, _>(StandardNormal)];
        let dec = ord1();
        for level in 0..3 {
            assert!(ordinal_loglik(&[level as f64], &z, &dec, &[true]) <= 0.0);
        }
        let c = (rng.gen::<u64>() % 10) as f64;
        for family in [CountFamily::Poisson, CountFamily::Zip, CountFamily::NegBinomial] {
            assert!(count_loglik(&[c], &z, &count_dec(family), &[true]).unwrap() <= 1e-12);
        }
    }
}

#[test]
fn samplers_match_degenerate_and_moment_oracles() {
    let mut rng = stream(23, "sampler");
    // Gaussian with noise disabled returns loading·z exactly
    let bank = DecoderBank {
        gaussian: Some(GaussianDecoder {
            n: 2,
            k: 2,
            loading: vec![1.0, 2.0, -0.5, 0.25],
            gamma_raw: vec![0.0, 0.0],
        }),
        ..Default::default()
    };
    let s = bank.sample(&[0.4, -1.2], &mut rng, false);
    assert!((s.continuous[0] - (0.4 - 2.4)).abs() < 1e-12);
    assert!((s.continuous[1] - (-0.2 - 0.3)).abs() < 1e-12);

    // ordinal with all mass on one level
    let bank = DecoderBank {
        ordinal: Some(OrdinalDecoder {
            k: 1,
            levels: vec![3],
            betas: vec![1.0],
            cut_raw: vec![50.0, 0.0],
        }),
        ..Default::default()
    };
    for _ in 0..100 {
        let s = bank.sample(&[0.0], &mut rng, true);
        assert_eq!(s.ordinal[0], 0.0);
    }

    // Poisson λ = 4: sample mean 4 ± 0.05 over 1e5 draws
    let bank = DecoderBank {
        count: Some(CountDecoder {
            gamma0: vec![4.0f64.ln()],
            ..count_dec(CountFamily::Poisson)
        }),
        ..Default::default()
    };
    let mut acc = 0.0;
    let n = 100_000;
    for _ in 0..n {
        acc += bank.sample(&[0.0], &mut rng, true).counts[0];
    }
    let mean = acc / n as f64;
    assert!((mean - 4.0).abs() < 0.05, "mean {mean}");
}

fn toy_series() -> crate::series::MultimodalSeries {
    let layout = SeriesLayout {
        n_cont: 2,
        ord_levels: vec![3, 4],
        n_count: 2,
        cat_classes: vec![3],
        n_inputs: 0,
    };
    let t_len = 5;
    let mut rng = stream(31, "toy-series");
    let cont: Vec<f64> = (0..t_len * 2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let ord: Vec<f64> = (0..t_len * 2)
        .map(|i| ((rng.gen::<u64>() % [3, 4][i % 2] as u64) as f64))
        .collect();
    let counts: Vec<f64> = (0..t_len * 2).map(|_| (rng.gen::<u64>() % 6) as f64).collect();
    let cat: Vec<f64> = (0..t_len).map(|_| (rng.gen::<u64>() % 3) as f64).collect();
    let mut s = crate::series::MultimodalSeries {
        t_len,
        continuous: Block::full(cont, 2),
        ordinal: Block::full(ord, 2),
        counts: Block::full(counts, 2),
        categorical: Block::full(cat, 1),
        inputs: vec![],
        layout,
    };
    // a few masked entries
    s.continuous.mask[3] = false;
    s.ordinal.mask[5] = false;
    s.counts.mask[2] = false;
    s.validate().unwrap();
    s
}

fn toy_bank(family: CountFamily, k: usize) -> DecoderBank {
    let mut rng = stream(37, "toy-bank");
    let mut norm = |n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.6).collect()
    };
    DecoderBank {
        gaussian: Some(GaussianDecoder {
            n: 2,
            k,
            loading: norm(2 * k),
            gamma_raw: vec![-0.3, 0.4],
        }),
        ordinal: Some(OrdinalDecoder {
            k,
            levels: vec![3, 4],
            betas: norm(2 * k),
            cut_raw: norm(2 + 3),
        }),
        count: Some(CountDecoder {
            family,
            n: 2,
            k,
            gamma0: vec![0.2, -0.1],
            gammas: norm(2 * k),
            zero_beta0: vec![0.3, -0.4],
            zero_betas: norm(2 * k),
            log_phi: vec![0.5, -0.2],
        }),
        categorical: Some(CategoricalDecoder {
            k,
            classes: vec![3],
            betas: norm(2 * k),
        }),
    }
}

/// The tape NLL must equal the negated plain per-step log-likelihood sum.
#[test]
fn tape_nll_matches_plain_evaluation() {
    for family in [CountFamily::Poisson, CountFamily::Zip, CountFamily::NegBinomial] {
        let k = 3;
        let series = toy_series();
        let bank = toy_bank(family, k);
        let mut rng = stream(41, "latents");
        let z_seq: Vec<f64> = (0..series.t_len * k)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();

        let plain = bank.loglik_series(&series, &z_seq, k).unwrap();

        let mut tape = Tape::new();
        let nodes = BankNodes::declare(&mut tape, &bank, "");
        let z = tape.input("z", &[k, series.t_len]);
        let targets = WindowTargets::from_windows(std::slice::from_ref(&series)).unwrap();
        let nll = nodes.nll(&mut tape, z, &targets).unwrap();
        tape.set_output(nll);
        let mut binds = HashMap::new();
        bind_bank(&bank, "", &mut binds);
        // column-major latent layout: column t holds z_t
        let mut zcols = vec![0.0; k * series.t_len];
        for t in 0..series.t_len {
            for d in 0..k {
                zcols[d * series.t_len + t] = z_seq[t * k + d];
            }
        }
        binds.insert("z".into(), Array::new(vec![k, series.t_len], zcols).unwrap());
        let out = tape.forward(&binds).unwrap();
        assert!(
            (out.item() + plain).abs() < 1e-9,
            "{family:?}: tape {} plain {}",
            out.item(),
            -plain
        );
    }
}

/// Gradients w.r.t. z and all decoder parameters pass the finite-difference
/// check.
#[test]
fn decoder_gradients_pass_grad_check() {
    for family in [CountFamily::Poisson, CountFamily::Zip, CountFamily::NegBinomial] {
        let k = 2;
        let series = toy_series();
        let bank = toy_bank(family, k);
        let mut tape = Tape::new();
        let nodes = BankNodes::declare(&mut tape, &bank, "");
        let z = tape.input("z", &[k, series.t_len]);
        let targets = WindowTargets::from_windows(std::slice::from_ref(&series)).unwrap();
        let nll = nodes.nll(&mut tape, z, &targets).unwrap();
        tape.set_output(nll);
        let mut binds = HashMap::new();
        bind_bank(&bank, "", &mut binds);
        let mut rng = stream(43, "latents2");
        binds.insert(
            "z".into(),
            Array::new(
                vec![k, series.t_len],
                (0..k * series.t_len)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5)
                    .collect(),
            )
            .unwrap(),
        );
        let err = tape.grad_check(&binds, 1e-5).unwrap();
        assert!(err < 1e-5, "{family:?}: grad err {err}");
    }
}
