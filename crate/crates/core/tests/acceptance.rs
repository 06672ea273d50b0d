//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or overruns its time budget.

use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;

use scwa::attention::{multi_head_attention, window_partition, AttentionConfig, AttentionWeights};
use scwa::codec::{Codec, CodecConfig, ParamPath, PAD_MULTIPLE};
use scwa::coder::encode_symbols;
use scwa::complexity::{attention_macs, count_ar_steps, model_macs, ratio_f64, MacQuery, Mode};
use scwa::context_model::GmmParams;
use scwa::entropy::{gmm_mass, quantize_cdf, DiscretizedPmf, SUPPORT_MAX, SUPPORT_MIN};
use scwa::ordo::{optimize, LossTerms, OrdoConfig, OrdoLoss};
use scwa::scheduler::{egr_rearrange, group_causal_mask, group_of_element, inverse_egr, CodingSchedule, Order};
use scwa::selftest::{noise_image, random_instance};
use scwa::synth::test_image;
use scwa::Tensor;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

fn desk_codec(seed: u64) -> Codec<f64> {
    let cfg = CodecConfig::desk();
    Codec::from_store(cfg, &cfg.init_weights(seed).unwrap()).unwrap()
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ar_steps() -> Outcome {
    let full = CodecConfig::full().schedule().map_err(|e| e.to_string())?;
    check(full.n_cs() == 4 && full.sfg(), || "full schedule is not N_cs=4 with SFG".into())?;
    check(count_ar_steps(&full) == 7, || format!("counted {} steps", count_ar_steps(&full)))?;
    check(full.context_invocations() == 7, || format!("{} invocations", full.context_invocations()))?;

    let codec = desk_codec(0);
    let enc = codec.encode(&test_image::<f64>(1, 64, 64)).map_err(|e| e.to_string())?;
    let dec = codec.decode(&enc.bytes).map_err(|e| e.to_string())?;
    check(dec.invocations == 7, || format!("decode ran the context model {} times", dec.invocations))?;
    check(dec.y_hat == enc.y_hat, || "decode differs".into())?;
    Ok(format!("{} context-model invocations in a full decode", dec.invocations))
}

fn attention_by_hand(q: &MacQuery) -> Ratio<u128> {
    let (h, w, k, s, n_cs, d) = (q.h, q.w, q.k, q.s, q.n_cs, q.d_e);
    let tokens = (k * k * n_cs) as u128;
    let per_window = 2 * tokens * tokens * d as u128 + 4 * tokens * (d * d) as u128;
    Ratio::new((h * w * n_cs) as u128 * per_window, (16 * 16 * s * s) as u128)
}

fn attention_formula() -> Outcome {
    let mut r = rng(2);
    let n = 200;
    for i in 0..n {
        let k = r.random_range(1..=16);
        let q = MacQuery {
            h: 16 * r.random_range(1..=300),
            w: 16 * r.random_range(1..=300),
            k,
            s: r.random_range(1..=k),
            n_cs: r.random_range(1..=8),
            d_e: r.random_range(1..=512),
            d_mlp: 4,
            heads: 1,
            layers: 1,
            k_m: 3,
            m: 192,
            mode: Mode::Naive,
        };
        let got = attention_macs(&q).map_err(|e| e.to_string())?;
        check(got == attention_by_hand(&q), || format!("query {i} {q:?}: {got} vs {}", attention_by_hand(&q)))?;
    }
    let base = MacQuery {
        h: 2160,
        w: 3840,
        k: 16,
        s: 16,
        n_cs: 4,
        d_e: 384,
        d_mlp: 1536,
        heads: 12,
        layers: 8,
        k_m: 3,
        m: 192,
        mode: Mode::Naive,
    };
    let a = attention_macs(&base).map_err(|e| e.to_string())?;
    let b = attention_macs(&MacQuery { s: 8, ..base }).map_err(|e| e.to_string())?;
    check(b / a == Ratio::from_integer(4), || format!("stride 8 / stride 16 = {}", b / a))?;
    Ok(format!("{n} random queries exact; K=16 s=8 costs exactly 4x s=16"))
}

fn complexity_table() -> Outcome {
    let reference = [1200.0, 1075.0, 829.0, 212.0, 204.0];
    let cfg = CodecConfig::full().model;
    let mut kmac = Vec::new();
    let mut totals = Vec::new();
    for (mode, want) in Mode::ALL.into_iter().zip(reference) {
        let r = model_macs(&MacQuery::from_config(&cfg, 2160, 3840, mode)).map_err(|e| e.to_string())?;
        let got = r.kmac_per_px();
        check((got - want).abs() <= 0.2 * want, || format!("{mode}: {got:.1} vs {want} kMAC/px"))?;
        kmac.push(got);
        totals.push(r.total);
    }
    check(kmac[0] > kmac[1] && kmac[1] > kmac[2] && kmac[2] > kmac[3] && kmac[3] >= kmac[4], || {
        format!("ordering broken: {kmac:?}")
    })?;
    let ratio = ratio_f64(&(totals[4] / totals[0]));
    check(ratio <= 0.20, || format!("cached/naive = {ratio:.3}"))?;
    let shown: Vec<String> = kmac.iter().map(|k| format!("{k:.0}")).collect();
    Ok(format!("kMAC/px {} ; cached/naive {ratio:.3}", shown.join(" > ")))
}

fn cache_mask_equivalence() -> Outcome {
    let mut r = rng(4);
    let cases = 60;
    let mut worst = 0.0f64;
    let mut by_ncs = [0usize; 3];
    for case in 0..cases {
        let (cfg, y, z) = random_instance(&mut r, 16);
        by_ncs[cfg.model.n_cs.trailing_zeros() as usize] += 1;
        let store = cfg.init_weights(case).map_err(|e| e.to_string())?;
        let single: Codec<f32> = Codec::from_store(cfg, &store).map_err(|e| e.to_string())?;
        let (y32, z32) = (y.cast::<f32>(), z.cast::<f32>());
        let a = single.latent_params(&y32, &z32, ParamPath::SinglePass).map_err(|e| e.to_string())?;
        let b = single.latent_params(&y32, &z32, ParamPath::Cached).map_err(|e| e.to_string())?;
        let d = a.max_abs_diff(&b);
        worst = worst.max(d);
        check(d <= 1e-5, || format!("case {case}: f32 parameters differ by {d:.2e}"))?;
        let (sa, _) = single.code_latents(&y32, &z32, ParamPath::SinglePass).map_err(|e| e.to_string())?;
        let (sb, _) = single.code_latents(&y32, &z32, ParamPath::Cached).map_err(|e| e.to_string())?;
        check(sa == sb, || format!("case {case}: f32 streams differ"))?;

        let double: Codec<f64> = Codec::from_store(cfg, &store).map_err(|e| e.to_string())?;
        let (da, _) = double.code_latents(&y, &z, ParamPath::SinglePass).map_err(|e| e.to_string())?;
        let (db, pb) = double.code_latents(&y, &z, ParamPath::Cached).map_err(|e| e.to_string())?;
        let pa = double.latent_params(&y, &z, ParamPath::SinglePass).map_err(|e| e.to_string())?;
        check(da == db && pa == pb, || format!("case {case}: f64 paths not bit-identical"))?;
    }
    Ok(format!(
        "{cases} configurations (N_cs 1/2/4: {}/{}/{}), max f32 deviation {worst:.1e}, streams identical",
        by_ncs[0], by_ncs[1], by_ncs[2]
    ))
}

fn sample_gmm(r: &mut SplitMix64, pi: &[f64], mu: &[f64], sigma: &[f64]) -> i32 {
    let u: f64 = r.random();
    let mut acc = 0.0;
    let mut k = pi.len() - 1;
    for (i, &p) in pi.iter().enumerate() {
        acc += p;
        if u < acc {
            k = i;
            break;
        }
    }
    let x = Normal::new(mu[k], sigma[k]).unwrap().sample(r);
    (x.round() as i32).clamp(SUPPORT_MIN, SUPPORT_MAX)
}

fn lossless_roundtrip() -> Outcome {
    let mut r = rng(5);
    let codec = desk_codec(5);
    let mut images = 0;
    for i in 0..40 {
        let (h, w) = (r.random_range(8..=96), r.random_range(8..=96));
        let x = if i % 2 == 0 { noise_image(i, h, w) } else { test_image(i, h, w) };
        let enc = codec.encode(&x).map_err(|e| e.to_string())?;
        let dec = codec.decode(&enc.bytes).map_err(|e| e.to_string())?;
        check(dec.y_hat == enc.y_hat && dec.z_hat == enc.z_hat, || format!("image {i} ({h}x{w}) lost symbols"))?;
        images += 1;
    }
    let mut latents = 0;
    for i in 0..60u64 {
        let (cfg, mut y, z) = random_instance(&mut r, 12);
        if i % 3 == 0 {
            // far tails, down to the support edges
            y = y.map(|v| (v * 40.0).clamp(f64::from(SUPPORT_MIN), f64::from(SUPPORT_MAX)));
        }
        let c: Codec<f64> = Codec::from_store(cfg, &cfg.init_weights(i).unwrap()).map_err(|e| e.to_string())?;
        let (payload, _) = c.code_latents(&y, &z, ParamPath::Cached).map_err(|e| e.to_string())?;
        let back = c.decode_latents(&payload, y.shape()[1], y.shape()[2]).map_err(|e| e.to_string())?;
        check(back.y_hat == y && back.z_hat == z, || format!("latent case {i} lost symbols"))?;
        latents += 1;
    }

    let mut worst = f64::NEG_INFINITY;
    for stream in 0..4 {
        let n = 10_000;
        let mut params = GmmParams::<f64>::new(3);
        let mut symbols = Vec::with_capacity(n);
        let mut tables = Vec::with_capacity(n);
        for _ in 0..n {
            let mut pi: Vec<f64> = (0..3).map(|_| r.random_range(0.05..1.0)).collect();
            let s: f64 = pi.iter().sum();
            pi.iter_mut().for_each(|p| *p /= s);
            let mu: Vec<f64> = (0..3).map(|_| r.random_range(-30.0..30.0)).collect();
            let lo = [-1.0, -0.5, 0.0, 0.5][stream];
            let sigma: Vec<f64> = (0..3).map(|_| 10f64.powf(r.random_range(lo..1.5))).collect();
            symbols.push(sample_gmm(&mut r, &pi, &mu, &sigma));
            tables.push(quantize_cdf(&DiscretizedPmf::gmm(&pi, &mu, &sigma)).map_err(|e| e.to_string())?);
            params.append(&GmmParams::constant(1, &pi, &mu, &sigma));
        }
        let rate: f64 = symbols
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (pi, mu, sigma) = params.element(i);
                -gmm_mass(f64::from(v), pi, mu, sigma).log2()
            })
            .sum();
        let bits = 8.0 * encode_symbols(&symbols, &tables).map_err(|e| e.to_string())?.len() as f64;
        check(bits <= rate * 1.002 + 64.0, || format!("stream {stream}: {bits} coded bits vs rate {rate:.1}"))?;
        worst = worst.max(bits - rate);
    }
    Ok(format!(
        "{images} images and {latents} latents restored exactly; coder overhead at most {worst:.1} bits per 10^4 symbols"
    ))
}

fn causality() -> Outcome {
    let codec = desk_codec(6);
    let m = codec.config().model;
    let sched = codec.schedule().clone();
    let (hl, wl) = (8, 8);
    let mut r = rng(6);
    let y = Tensor::from_fn(vec![m.m, hl, wl], |_| f64::from(r.random_range(-8..=8)));
    let z = Tensor::from_fn(vec![codec.config().n_h, 2, 2], |_| f64::from(r.random_range(-4..=4)));
    let plane = hl * (wl / 2) * m.p_cs();
    let base = codec.latent_params(&y, &z, ParamPath::SinglePass).map_err(|e| e.to_string())?;
    let base_sym = egr_rearrange(&y, &sched).map_err(|e| e.to_string())?;
    let mut per_group = vec![0usize; sched.len()];
    let mut decoded = vec![0usize; sched.len()];
    for c in 0..m.m {
        for u in 0..hl {
            for v in 0..wl {
                let g = group_of_element(&sched, m.p_cs(), c, u, v);
                per_group[g] += 1;
                let mut yp = y.clone();
                let i = (c * hl + u) * wl + v;
                yp.data_mut()[i] += if yp.data()[i] > 0.0 { -5.0 } else { 5.0 };
                let keep = 0..(g + 1) * plane;

                let single = codec.latent_params(&yp, &z, ParamPath::SinglePass).map_err(|e| e.to_string())?;
                check(single.slice(keep.clone()) == base.slice(keep.clone()), || {
                    format!("element ({c},{u},{v}) in group {g} changed parameters of groups <= {g}")
                })?;
                let cached = codec.latent_params(&yp, &z, ParamPath::Cached).map_err(|e| e.to_string())?;
                check(cached.slice(keep.clone()) == base.slice(keep), || {
                    format!("cached decoder: element ({c},{u},{v}) leaked into groups <= {g}")
                })?;
                // full coding roundtrip on a spread subset
                if i % 17 != 0 {
                    continue;
                }
                decoded[g] += 1;
                let (payload, _) = codec.code_latents(&yp, &z, ParamPath::Cached).map_err(|e| e.to_string())?;
                let dec = codec.decode_latents(&payload, hl, wl).map_err(|e| e.to_string())?;
                let sym = egr_rearrange(&dec.y_hat, &sched).map_err(|e| e.to_string())?;
                let before = 0..g * plane;
                check(sym.data()[before.clone()] == base_sym.data()[before], || {
                    format!("element ({c},{u},{v}) changed decoded symbols before group {g}")
                })?;
            }
        }
    }
    check(per_group.iter().all(|&n| n > 0), || format!("some group never perturbed: {per_group:?}"))?;
    check(decoded.iter().all(|&n| n > 0), || format!("some group never decoded: {decoded:?}"))?;
    Ok(format!(
        "{} single-element perturbations across all {} groups ({} decoded end to end)",
        y.len(),
        sched.len(),
        decoded.iter().sum::<usize>()
    ))
}

fn gradient() -> Outcome {
    let cfg = CodecConfig::desk();
    let codec: Codec<f64> = Codec::from_store(cfg, &cfg.init_weights(7).unwrap()).map_err(|e| e.to_string())?;
    let n = PAD_MULTIPLE;
    let x = test_image::<f64>(7, n, n);
    let (y, z) = codec.analyze(&x).map_err(|e| e.to_string())?;
    // between integer points, where the relaxed loss is smooth
    let (y, z) = (y.map(|v| v + 0.1), z.map(|v| v + 0.1));
    let loss = OrdoLoss::new(&codec, &x, n, n, 0.014, false).map_err(|e| e.to_string())?;
    let (_, gy, gz) = loss.grad(&y, &z).map_err(|e| e.to_string())?;
    let total = |y: &Tensor<f64>, z: &Tensor<f64>| loss.eval(y, z).map(|t| t.total).map_err(|e| e.to_string());

    let h = 1e-4;
    let (mut diff, mut norm, mut worst) = (0.0f64, 0.0f64, 0.0f64);
    for which in 0..2 {
        let (base, ad) = if which == 0 { (&y, &gy) } else { (&z, &gz) };
        for i in 0..base.len() {
            let (mut p, mut m) = (base.clone(), base.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let (fp, fm) = if which == 0 {
                (total(&p, &z)?, total(&m, &z)?)
            } else {
                (total(&y, &p)?, total(&y, &m)?)
            };
            let fd = (fp - fm) / (2.0 * h);
            let e = ad.data()[i] - fd;
            diff += e * e;
            norm += fd * fd;
            worst = worst.max(e.abs() / fd.abs().max(1.0));
        }
    }
    let rel = diff.sqrt() / norm.sqrt().max(f64::MIN_POSITIVE);
    check(rel <= 1e-4, || format!("relative error {rel:.2e}"))?;
    Ok(format!("{} leaves, relative error {rel:.1e} (elementwise {worst:.1e})", y.len() + z.len()))
}

fn ordo_behaviour() -> Outcome {
    let codec = desk_codec(0);
    let seeds = 50;
    let (mut improved, mut rate_down) = (0, 0);
    let rate = |t: &LossTerms| t.rate_y + t.rate_z;
    for seed in 0..seeds {
        let x = test_image::<f64>(seed, 64, 64);
        let d = optimize(&codec, &x, &OrdoConfig::default()).map_err(|e| e.to_string())?;
        check(d.trace.len() == 27, || format!("trace has {} entries", d.trace.len()))?;
        improved += usize::from(d.last().total <= d.initial().total);
        let cfg0 = OrdoConfig {
            lambda: 0.0,
            ..OrdoConfig::default()
        };
        let d0 = optimize(&codec, &x, &cfg0).map_err(|e| e.to_string())?;
        rate_down += usize::from(rate(d0.last()) < rate(d0.initial()));

        if seed < 5 {
            let plain = codec.encode(&x).map_err(|e| e.to_string())?;
            let tuned = codec
                .encode_latents(&d.y_hat, &d.z_hat, 64, 64, ParamPath::Cached)
                .map_err(|e| e.to_string())?;
            let a = codec.decode(&plain.bytes).map_err(|e| e.to_string())?;
            let b = codec.decode(&tuned.bytes).map_err(|e| e.to_string())?;
            check(b.y_hat == d.y_hat, || format!("seed {seed}: refined stream does not decode"))?;
            check((a.invocations, a.macs) == (b.invocations, b.macs), || {
                format!("seed {seed}: decoder cost changed with refinement")
            })?;
        }
    }
    let need = seeds as usize * 9 / 10;
    check(improved >= need, || format!("loss reduced on {improved}/{seeds}"))?;
    check(rate_down >= need, || format!("rate reduced (lambda=0) on {rate_down}/{seeds}"))?;
    Ok(format!(
        "loss not increased on {improved}/{seeds}, rate reduced at lambda=0 on {rate_down}/{seeds}, decoder cost unchanged"
    ))
}

fn egr_oracle(r: &mut SplitMix64) -> Result<(), String> {
    let n_cs = [1, 2, 4, 8][r.random_range(0..4)];
    let p_cs = r.random_range(1..=4);
    let (c, h, w) = (n_cs * p_cs, r.random_range(1..=16), 2 * r.random_range(1..=8));
    let order = if r.random_bool(0.5) { Order::Cfo } else { Order::Sfo };
    let sched = CodingSchedule::build(n_cs, order, r.random_bool(0.5)).map_err(|e| e.to_string())?;
    let idx = Tensor::from_fn(vec![c, h, w], |i| i);
    let e = egr_rearrange(&idx, &sched).map_err(|e| e.to_string())?;
    check(e.len() == idx.len(), || "size changed".into())?;
    let plane = h * (w / 2) * p_cs;
    let mut seen = vec![false; idx.len()];
    for (pos, &i) in e.data().iter().enumerate() {
        check(!std::mem::replace(&mut seen[i], true), || format!("({c},{h},{w}): {i} twice"))?;
        let (ch, u, v) = (i / (h * w), i / w % h, i % w);
        let g = group_of_element(&sched, p_cs, ch, u, v);
        check(pos / plane == g, || format!("({c},{h},{w}): element {i} outside its group plane"))?;
    }
    check(inverse_egr(&e, &sched).map_err(|e| e.to_string())? == idx, || "inverse fails".into())
}

fn mask_layout(n_cs: usize, k: usize, shifted: bool, r: &mut SplitMix64) -> Result<(), String> {
    let a = AttentionConfig { d_e: 4, heads: 2, k, n_cs };
    let planes = 2 * n_cs;
    let (h, w) = (k + k / 2, k);
    let x = Tensor::from_fn(vec![planes, h, w, 4], |_| r.random_range(-1.0..1.0f64));
    let batch = window_partition(&x, &a, shifted).map_err(|e| e.to_string())?;
    let seq = batch.seq_len();
    let per = seq / planes;
    let mask: Tensor<f64> = group_causal_mask(&batch.groups, &batch.groups);
    for i in 0..seq {
        for j in 0..seq {
            let allowed = j / per < i / per;
            check((mask.data()[i * seq + j] == 0.0) == allowed, || format!("mask[{i}][{j}]"))?;
        }
    }
    let mut weights = AttentionWeights::<f64>::identity(&a);
    weights.rel_bias = weights.rel_bias.map(|_| r.random_range(-0.5..0.5));
    let base = multi_head_attention(&a, &batch, &batch, &weights, &mask).map_err(|e| e.to_string())?;
    for j in 0..seq {
        let mut mem = batch.clone();
        for win in 0..batch.n_windows() {
            let at = (win * seq + j) * 4;
            for v in &mut mem.tokens.data_mut()[at..at + 4] {
                *v += 0.75;
            }
        }
        let out = multi_head_attention(&a, &batch, &mem, &weights, &mask).map_err(|e| e.to_string())?;
        for win in 0..batch.n_windows() {
            for i in 0..seq {
                let row = (win * seq + i) * 4..(win * seq + i + 1) * 4;
                let changed = out.tokens.data()[row.clone()] != base.tokens.data()[row];
                let pad = |s: usize| batch.pad[win * seq + s];
                let expect = !pad(i) && !pad(j) && j / per < i / per;
                check(changed == expect, || {
                    format!("N_cs={n_cs} K={k} shifted={shifted} window {win}: key {j} -> query {i} is {changed}")
                })?;
            }
        }
    }
    Ok(())
}

fn scheduler_oracles() -> Outcome {
    let mut r = rng(9);
    let shapes = 1000;
    for _ in 0..shapes {
        egr_oracle(&mut r)?;
    }
    let mut layouts = 0;
    for n_cs in [1, 2, 4, 8] {
        for k in (2..=16).step_by(2) {
            if k * k * n_cs > 64 {
                continue;
            }
            for shifted in [false, true] {
                mask_layout(n_cs, k, shifted, &mut r)?;
                layouts += 1;
            }
        }
    }
    Ok(format!("EGR bijection on {shapes} shapes; exhaustive mask oracle on {layouts} window layouts"))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 9] = [
        ("autoregressive step count", ar_steps, Duration::from_secs(1)),
        ("attention MAC formula", attention_formula, Duration::from_secs(1)),
        ("optimization-mode complexity", complexity_table, Duration::from_secs(1)),
        ("cache/mask equivalence", cache_mask_equivalence, Duration::from_secs(60)),
        ("lossless roundtrip and coder overhead", lossless_roundtrip, Duration::from_secs(60)),
        ("causality", causality, Duration::from_secs(60)),
        ("gradient correctness", gradient, Duration::from_secs(30)),
        ("latent refinement behaviour", ordo_behaviour, Duration::from_secs(300)),
        ("scheduler and mask oracles", scheduler_oracles, Duration::from_secs(30)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.contains(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{id} {} [{name}] {detail} ({:.2} s)",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
