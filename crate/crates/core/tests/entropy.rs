use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use scwa::coder::{decode_symbols, encode_symbols};
use scwa::context_model::GmmParams;
use scwa::entropy::{gmm_mass, quantize_cdf, rate_bits, DiscretizedPmf};

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[test]
fn single_gaussian_bin_matches_erf() {
    let m = gmm_mass(0.0, &[1.0f64], &[0.0], &[1.0]);
    assert!((m - 0.3829249).abs() < 1e-7);
    for (v, mu, s) in [(2.0, 0.3, 1.7), (-5.0, 1.0, 2.5), (0.0, -0.4, 0.2), (30.0, 0.0, 8.0)] {
        let want = phi((v + 0.5 - mu) / s) - phi((v - 0.5 - mu) / s);
        let got = gmm_mass(v, &[1.0f64], &[mu], &[s]);
        assert!((got - want.max(1.0 / 65536.0)).abs() < 1e-12, "{v} {mu} {s}");
    }
}

#[test]
fn mixture_mass_is_symmetric_and_complete() {
    let (pi, mu, sigma) = ([0.2f64, 0.5, 0.3], [-1.5, 0.0, 1.5], [0.8, 2.0, 0.8]);
    let neg: Vec<f64> = mu.iter().map(|m| -m).collect();
    let mut total = 0.0;
    for v in -20..=20 {
        let v = v as f64;
        assert!((gmm_mass(v, &pi, &mu, &sigma) - gmm_mass(-v, &pi, &neg, &sigma)).abs() < 1e-12);
        total += gmm_mass(v, &pi, &mu, &sigma);
    }
    assert!(total >= 1.0 - 1e-6 && total <= 1.0 + 1e-3);
}

#[test]
fn rate_is_the_sum_of_negative_log_masses() {
    let p = GmmParams {
        k_m: 2,
        pi: vec![0.5, 0.5, 0.9, 0.1, 0.3, 0.7, 1.0, 0.0],
        mu: vec![0.0, 2.0, -1.0, 4.0, 0.5, 0.5, 0.0, 0.0],
        sigma: vec![1.0, 1.0, 0.5, 3.0, 2.0, 0.1, 1.0, 1.0],
    };
    let y = [1.0f64, -1.0, 0.0, 3.0];
    let mut want = 0.0;
    for (i, &v) in y.iter().enumerate() {
        let mut m = 0.0;
        for k in 0..2 {
            let (w, mu, s) = (p.pi[2 * i + k], p.mu[2 * i + k], p.sigma[2 * i + k]);
            m += w * (phi((v + 0.5 - mu) / s) - phi((v - 0.5 - mu) / s));
        }
        want -= m.max(1.0 / 65536.0).log2();
    }
    assert!((rate_bits(&y, &p).unwrap() - want).abs() < 1e-9);
}

#[test]
fn coded_length_tracks_the_model_rate() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(17);
    let n = 10_000;
    let mut tables = Vec::with_capacity(n);
    let mut symbols = Vec::with_capacity(n);
    let mut ideal = 0.0;
    for _ in 0..n {
        let mu: f64 = rng.random_range(-8.0..8.0);
        let sigma: f64 = rng.random_range(0.3..12.0);
        let pmf = DiscretizedPmf::gmm(&[1.0f64], &[mu], &[sigma]);
        let v = Normal::new(mu, sigma).unwrap().sample(&mut rng).round() as i32;
        let t = quantize_cdf(&pmf).unwrap();
        ideal -= gmm_mass(v as f64, &[1.0f64], &[mu], &[sigma]).log2();
        tables.push(t);
        symbols.push(v);
    }
    let bytes = encode_symbols(&symbols, &tables).unwrap();
    let bits = 8.0 * bytes.len() as f64;
    assert!(bits <= ideal * 1.001 + 64.0, "{bits} coded vs {ideal} ideal");
    assert_eq!(decode_symbols(&bytes, &tables).unwrap(), symbols);
}
