use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn scwa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scwa"))
        .args(args)
        .output()
        .expect("spawn scwa")
}

fn desk(args: &[&str]) -> Output {
    let mut all = vec!["--preset", "desk"];
    all.extend_from_slice(args);
    scwa(&all)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn value(report: &str, key: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no `{key}` in\n{report}"))
        .to_string()
}

fn write_ppm(path: &Path, w: usize, h: usize, seed: u64) {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let mut px = Vec::with_capacity(3 * w * h);
    for i in 0..3 * w * h {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        let smooth = (i % (3 * w)) * 200 / (3 * w);
        px.push((smooth as u64 + state % 40) as u8);
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&px);
    std::fs::write(path, bytes).unwrap();
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Self { dir: TempDir::new().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

fn read_latent(path: &Path) -> (Vec<usize>, Vec<f32>) {
    let b = std::fs::read(path).unwrap();
    assert_eq!(&b[..4], b"SCWT");
    let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as usize;
    let rank = u32_at(4);
    let shape: Vec<usize> = (0..rank).map(|i| u32_at(8 + 4 * i)).collect();
    let data = b[8 + 4 * rank..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    (shape, data)
}

#[test]
fn encode_decode_roundtrip_reports() {
    let w = Work::new();
    write_ppm(&w.path("in.ppm"), 32, 32, 1);
    let enc = ok(desk(&["encode", &w.s("in.ppm"), "-o", &w.s("a.scwb"), "--latents", &w.s("enc.scwt")]));
    let bytes = std::fs::read(w.path("a.scwb")).unwrap();
    assert_eq!(value(&enc, "bytes").parse::<usize>().unwrap(), bytes.len());
    let bpp: f64 = value(&enc, "bpp").parse().unwrap();
    assert!((bpp - 8.0 * bytes.len() as f64 / (32.0 * 32.0)).abs() < 1e-5);

    let rate = value(&enc, "rate_y_bits").parse::<f64>().unwrap() + value(&enc, "rate_z_bits").parse::<f64>().unwrap();
    let coded: f64 = value(&enc, "payload_bits").parse().unwrap();
    assert!(coded <= rate * 1.002 + 64.0, "coded {coded} rate {rate}");
    assert!(coded >= rate - 64.0, "coded {coded} rate {rate}");

    let dec = ok(desk(&["decode", &w.s("a.scwb"), "-o", &w.s("out.ppm"), "--latents", &w.s("dec.scwt")]));
    assert_eq!(value(&dec, "height"), "32");
    assert_eq!(value(&dec, "width"), "32");
    assert_eq!(value(&dec, "n_cs"), "4");
    assert_eq!(value(&dec, "sfg"), "true");
    assert_eq!(value(&dec, "invocations"), "7");
    assert_eq!(read_latent(&w.path("enc.scwt")), read_latent(&w.path("dec.scwt")));

    let first = std::fs::read(w.path("out.ppm")).unwrap();
    assert!(first.starts_with(b"P6"));
    ok(desk(&["decode", &w.s("a.scwb"), "-o", &w.s("out2.ppm")]));
    assert_eq!(first, std::fs::read(w.path("out2.ppm")).unwrap());
}

#[test]
fn encoding_is_deterministic() {
    let w = Work::new();
    write_ppm(&w.path("in.ppm"), 40, 24, 7);
    ok(desk(&["encode", &w.s("in.ppm"), "-o", &w.s("a.scwb")]));
    ok(desk(&["encode", &w.s("in.ppm"), "-o", &w.s("b.scwb")]));
    assert_eq!(std::fs::read(w.path("a.scwb")).unwrap(), std::fs::read(w.path("b.scwb")).unwrap());
    let dec = ok(desk(&["decode", &w.s("a.scwb"), "-o", &w.s("out.ppm")]));
    assert_eq!(value(&dec, "padded_height"), "32");
    assert_eq!(value(&dec, "padded_width"), "64");
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let w = Work::new();
    write_ppm(&w.path("in.ppm"), 32, 32, 3);
    ok(desk(&["encode", &w.s("in.ppm"), "-o", &w.s("a.scwb")]));
    let good = std::fs::read(w.path("a.scwb")).unwrap();

    std::fs::write(w.path("short.scwb"), &good[..20]).unwrap();
    assert_eq!(desk(&["decode", &w.s("short.scwb"), "-o", &w.s("x.ppm")]).status.code(), Some(4));

    let mut bad = good.clone();
    bad[0] = b'X';
    std::fs::write(w.path("bad.scwb"), &bad).unwrap();
    assert_eq!(desk(&["decode", &w.s("bad.scwb"), "-o", &w.s("x.ppm")]).status.code(), Some(4));

    let other_seed = desk(&["--set", "seed=9", "decode", &w.s("a.scwb"), "-o", &w.s("x.ppm")]);
    assert_eq!(other_seed.status.code(), Some(5));

    assert_eq!(desk(&["decode", &w.s("missing.scwb"), "-o", &w.s("x.ppm")]).status.code(), Some(3));
    std::fs::write(w.path("text.ppm"), b"hello").unwrap();
    assert_eq!(desk(&["encode", &w.s("text.ppm"), "-o", &w.s("x.scwb")]).status.code(), Some(4));

    assert_eq!(desk(&["--set", "n_cs=3", "config"]).status.code(), Some(2));
    assert_eq!(desk(&["--set", "bogus=1", "config"]).status.code(), Some(2));
    assert_eq!(scwa(&["--preset", "huge", "config"]).status.code(), Some(2));
    assert_eq!(scwa(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(desk(&["analyze", "--resolution", "wide"]).status.code(), Some(2));
}

#[test]
fn config_file_and_overrides_stack() {
    let w = Work::new();
    std::fs::write(w.path("run.cfg"), "# smaller\nn_cs = 2\nlambda = 0.0035\n").unwrap();
    let text = ok(desk(&["--config", &w.s("run.cfg"), "--set", "lambda=0.05", "config"]));
    let get = |k: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{k} = ")))
            .unwrap()
            .to_string()
    };
    assert_eq!(get("n_cs"), "2");
    assert_eq!(get("lambda"), "0.05");
    assert_eq!(get("m"), "16");

    std::fs::write(w.path("echo.cfg"), &text).unwrap();
    assert_eq!(ok(scwa(&["--config", &w.s("echo.cfg"), "config"])), text);
}

#[test]
fn analyze_reports_and_csv() {
    let w = Work::new();
    let out = ok(scwa(&["analyze", "--csv", &w.s("all.csv")]));
    assert_eq!(value(&out, "ar_steps"), "7");
    assert_eq!(value(&out, "sfg_step_reduction"), "1/8");
    let kmac: Vec<f64> = out
        .lines()
        .filter(|l| l.starts_with("mode="))
        .map(|l| {
            l.split_whitespace()
                .find_map(|f| f.strip_prefix("kmac_per_px="))
                .unwrap()
                .parse()
                .unwrap()
        })
        .collect();
    assert_eq!(kmac.len(), 5);
    assert!(kmac.windows(2).all(|p| p[0] > p[1]), "{kmac:?}");

    let csv = std::fs::read_to_string(w.path("all.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    ok(scwa(&["analyze", "--resolution", "1920x1080", "--mode", "cached", "--csv", &w.s("one.csv")]));
    let one = std::fs::read_to_string(w.path("one.csv")).unwrap();
    let rows: Vec<&str> = one.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("cached,1088,1920,"), "{}", rows[1]);
    let r = scwa::complexity::MacReport::from_csv(rows[1]).unwrap();
    assert_eq!(r.to_csv(), rows[1]);
}

#[test]
fn ordo_trace_and_stream() {
    let w = Work::new();
    let out = ok(desk(&["ordo", "--size", "32", "--steps", "0"]));
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "step,rate_y,rate_z,mse,total");
    assert_eq!(rows.len(), 2);

    ok(desk(&[
        "ordo", "--size", "32", "--steps", "4", "--alpha0", "0.05", "--gamma", "0.7", "--lambda", "0.02", "--seed", "3",
        "--trace", &w.s("t.csv"), "-o", &w.s("o.scwb"),
    ]));
    let trace = std::fs::read_to_string(w.path("t.csv")).unwrap();
    assert_eq!(trace.lines().count(), 6);
    let dec = ok(desk(&["--set", "seed=3", "decode", &w.s("o.scwb"), "-o", &w.s("o.ppm")]));
    assert_eq!(value(&dec, "width"), "32");

    assert_eq!(desk(&["ordo", "--gamma", "1.5"]).status.code(), Some(2));
}

#[test]
fn encode_with_ordo_decodes_with_the_plain_decoder() {
    let w = Work::new();
    write_ppm(&w.path("in.ppm"), 32, 32, 5);
    let enc = ok(desk(&["--set", "steps=3", "encode", "--ordo", &w.s("in.ppm"), "-o", &w.s("a.scwb"), "--latents", &w.s("e.scwt")]));
    assert_eq!(value(&enc, "ordo"), "true");
    ok(desk(&["decode", &w.s("a.scwb"), "-o", &w.s("out.ppm"), "--latents", &w.s("d.scwt")]));
    assert_eq!(read_latent(&w.path("e.scwt")), read_latent(&w.path("d.scwt")));
}

#[test]
fn saved_weights_match_seeded_weights() {
    let w = Work::new();
    let init = ok(desk(&["--set", "seed=4", "init-weights", "-o", &w.s("w.bin")]));
    assert_eq!(value(&init, "digest").len(), 64);
    write_ppm(&w.path("in.ppm"), 32, 32, 2);
    ok(desk(&["--set", "seed=4", "encode", &w.s("in.ppm"), "-o", &w.s("a.scwb")]));
    let weights = format!("weights={}", w.s("w.bin"));
    ok(desk(&["--set", &weights, "decode", &w.s("a.scwb"), "-o", &w.s("out.ppm")]));
}

#[test]
fn selftest_lists_every_suite_once() {
    let out = scwa(&["selftest"]);
    let text = stdout(&out);
    assert!(out.status.success(), "{text}");
    for suite in scwa::selftest::SUITES {
        let n = text.lines().filter(|l| l.starts_with(&format!("suite={suite} "))).count();
        assert_eq!(n, 1, "{suite}\n{text}");
    }
    assert!(text.contains("passed=5 failed=0"));

    let faulty = scwa(&["selftest", "--inject-mask-fault"]);
    assert_eq!(faulty.status.code(), Some(1));
    assert!(stdout(&faulty).contains("suite=cache_mask_equivalence status=FAIL"));
}
