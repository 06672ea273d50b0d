//! `scwa`: encode, decode, analyze, refine and self-check with the
//! window-attention entropy model.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use scwa::codec::{padded_len, Codec, ParamPath};
use scwa::complexity::{count_ar_steps, model_macs, ratio_f64, sfg_step_reduction, MacQuery, MacReport, Mode};
use scwa::config::RunConfig;
use scwa::ordo::optimize;
use scwa::selftest::{self, SelftestOptions};
use scwa::weights::WeightStore;
use scwa::{io, synth, Error, Tensor};

mod exit {
    pub const FAILURE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const FORMAT: u8 = 4;
    pub const MISMATCH: u8 = 5;
    pub const NUMERIC: u8 = 6;
}

#[derive(Parser)]
#[command(name = "scwa", version, about = "Learned image coding with a window-attention entropy model")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Base configuration: `full` or `desk`.
    #[arg(long, global = true, default_value = "full")]
    preset: String,
    /// Key-value configuration file applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` override applied last; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode a P6 PPM or raw tensor image into a bitstream.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Refine the latents before coding.
        #[arg(long)]
        ordo: bool,
        /// Also write the quantized latent as a raw tensor.
        #[arg(long)]
        latents: Option<PathBuf>,
    },
    /// Decode a bitstream into a PPM image.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the decoded latent as a raw tensor.
        #[arg(long)]
        latents: Option<PathBuf>,
    },
    /// Analytic multiply-accumulate counts of the context model.
    Analyze {
        /// `WIDTHxHEIGHT`, padded to multiples of 32; repeatable.
        #[arg(long = "resolution", default_value = "3840x2160")]
        resolutions: Vec<String>,
        /// Modes to report; all when omitted.
        #[arg(long = "mode")]
        modes: Vec<Mode>,
        /// Write the reports as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Refine the latents of an image and print the loss trace as CSV.
    Ordo {
        /// Image to refine; a seeded synthetic image when omitted.
        input: Option<PathBuf>,
        /// Side of the synthetic image.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        alpha0: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the trace here instead of standard output.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also code the refined latents into a bitstream.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run the built-in oracle suites.
    Selftest {
        #[arg(long, hide = true)]
        inject_mask_fault: bool,
    },
    /// Write the seeded weights for the configuration.
    InitWeights {
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print the resolved configuration.
    Config,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(exit::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let Some(core) = e.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return if e.chain().any(|c| c.is::<std::io::Error>()) { exit::IO } else { exit::USAGE };
    };
    match core {
        Error::Config(_) => exit::USAGE,
        Error::Io(_) => exit::IO,
        Error::Truncated
        | Error::Corrupt(_)
        | Error::UnsupportedVersion(_)
        | Error::SymbolOutOfSupport { .. }
        | Error::SupportTooLarge(_) => exit::FORMAT,
        Error::Mismatch(_) => exit::MISMATCH,
        Error::NonFinite { .. } => exit::NUMERIC,
        _ => exit::FAILURE,
    }
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::preset(&common.preset)?;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for kv in &common.sets {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Config(format!("`--set {kv}`: expected KEY=VALUE")).into());
        };
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn weights(cfg: &RunConfig) -> anyhow::Result<WeightStore> {
    Ok(match &cfg.weights {
        Some(path) => WeightStore::load(path).with_context(|| format!("loading weights {}", path.display()))?,
        None => cfg.codec.init_weights(cfg.seed)?,
    })
}

fn codec(cfg: &RunConfig) -> anyhow::Result<Codec<f64>> {
    Ok(Codec::from_store(cfg.codec.clone(), &weights(cfg)?)?)
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_image(path: &Path) -> anyhow::Result<Tensor<f64>> {
    io::read_image(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let mut cfg = resolve(&cli.common)?;
    match cli.cmd {
        Cmd::Encode {
            input,
            output,
            ordo,
            latents,
        } => {
            let codec = codec(&cfg)?;
            let image = read_image(&input)?;
            let enc = if ordo {
                let s = image.shape();
                let r = optimize(&codec, &image, &cfg.ordo)?;
                codec.encode_latents(&r.y_hat, &r.z_hat, s[1], s[2], ParamPath::Cached)?
            } else {
                codec.encode(&image)?
            };
            write(&output, &enc.bytes)?;
            if let Some(p) = latents {
                io::write_tensor(&p, &enc.y_hat)?;
            }
            let h = &enc.stream.header;
            println!("height={}", h.height);
            println!("width={}", h.width);
            println!("bytes={}", enc.bytes.len());
            println!("bpp={:.6}", enc.bpp());
            println!("rate_y_bits={:.3}", enc.rate_y);
            println!("rate_z_bits={:.3}", enc.rate_z);
            println!("payload_bits={}", enc.payload_bits());
            println!("ordo={ordo}");
        }
        Cmd::Decode { input, output, latents } => {
            let codec = codec(&cfg)?;
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let dec = codec.decode(&bytes)?;
            io::write_ppm(&output, &dec.image)?;
            if let Some(p) = latents {
                io::write_tensor(&p, &dec.y_hat)?;
            }
            let h = &dec.header;
            println!("height={}", h.height);
            println!("width={}", h.width);
            println!("padded_height={}", h.padded_height);
            println!("padded_width={}", h.padded_width);
            println!("m={}", h.m);
            println!("n_cs={}", h.n_cs);
            println!("k={}", h.k);
            println!("layers={}", h.layers);
            println!("k_m={}", h.k_m);
            println!("order={}", h.order);
            println!("sfg={}", h.sfg);
            println!("invocations={}", dec.invocations);
            println!("macs={}", dec.macs);
        }
        Cmd::Analyze {
            resolutions,
            modes,
            csv,
        } => {
            let modes = if modes.is_empty() { Mode::ALL.to_vec() } else { modes };
            let sched = cfg.codec.schedule()?;
            println!("ar_steps={}", count_ar_steps(&sched));
            println!("sfg_step_reduction={}", sfg_step_reduction(cfg.codec.model.n_cs));
            let mut table = format!("{}\n", MacReport::CSV_HEADER);
            for res in &resolutions {
                let (w, h) = parse_resolution(res)?;
                // counted at the size the encoder actually codes
                let (h, w) = (padded_len(h), padded_len(w));
                let mut naive = None;
                for &mode in &modes {
                    let r = model_macs(&MacQuery::from_config(&cfg.codec.model, h, w, mode))?;
                    if mode == Mode::Naive {
                        naive = Some(r.total);
                    }
                    let mut line = format!(
                        "mode={} height={h} width={w} total_macs={} kmac_per_px={:.2}",
                        mode,
                        r.total,
                        r.kmac_per_px()
                    );
                    if let Some(n) = naive {
                        let _ = write!(line, " vs_naive={:.4}", ratio_f64(&(r.total / n)));
                    }
                    println!("{line}");
                    table.push_str(&r.to_csv());
                    table.push('\n');
                }
            }
            if let Some(p) = csv {
                write(&p, table.as_bytes())?;
            }
        }
        Cmd::Ordo {
            input,
            size,
            alpha0,
            gamma,
            steps,
            lambda,
            seed,
            trace,
            output,
        } => {
            if let Some(v) = alpha0 {
                cfg.ordo.alpha0 = v;
            }
            if let Some(v) = gamma {
                cfg.ordo.gamma = v;
            }
            if let Some(v) = steps {
                cfg.ordo.steps = v;
            }
            if let Some(v) = lambda {
                cfg.ordo.lambda = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            cfg.validate()?;
            let codec = codec(&cfg)?;
            let image = match &input {
                Some(p) => read_image(p)?,
                None => synth::test_image(cfg.seed, size, size),
            };
            let r = optimize(&codec, &image, &cfg.ordo)?;
            match trace {
                Some(p) => write(&p, r.trace_csv().as_bytes())?,
                None => print!("{}", r.trace_csv()),
            }
            if let Some(p) = output {
                let s = image.shape();
                let enc = codec.encode_latents(&r.y_hat, &r.z_hat, s[1], s[2], ParamPath::Cached)?;
                write(&p, &enc.bytes)?;
            }
            eprintln!(
                "initial_total={:.3} final_total={:.3} forward_evals={} gradient_evals={}",
                r.initial().total,
                r.last().total,
                r.forward_evals,
                r.gradient_evals
            );
        }
        Cmd::Selftest { inject_mask_fault } => {
            let outcomes = selftest::run(SelftestOptions { inject_mask_fault });
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            for o in &outcomes {
                let status = if o.passed { "PASS" } else { "FAIL" };
                println!("suite={} status={status} detail={}", o.name, o.detail.replace('\n', " "));
            }
            println!("passed={} failed={failed}", outcomes.len() - failed);
            if failed > 0 {
                return Ok(exit::FAILURE);
            }
        }
        Cmd::InitWeights { output } => {
            let store = cfg.codec.init_weights(cfg.seed)?;
            store.save(&output).with_context(|| format!("writing {}", output.display()))?;
            println!("tensors={}", store.len());
            println!("digest={}", hex::encode(store.digest()));
        }
        Cmd::Config => print!("{}", cfg.to_text()),
    }
    Ok(0)
}

fn parse_resolution(s: &str) -> anyhow::Result<(usize, usize)> {
    let parsed = s
        .split_once(['x', 'X'])
        .and_then(|(w, h)| Some((w.trim().parse().ok()?, h.trim().parse().ok()?)));
    match parsed {
        Some((w, h)) if w > 0 && h > 0 => Ok((w, h)),
        _ => bail!(Error::Config(format!("resolution `{s}`: expected WIDTHxHEIGHT"))),
    }
}
