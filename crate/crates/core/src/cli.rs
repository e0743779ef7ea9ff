//! The `finermoe` command line.
//!
//! Matrix files used by `forward` are a text header `rows cols\n` followed
//! by `rows·cols` little-endian `f32` values in row-major order.
//!
//! Exit codes: 0 success, 1 failed check or other error, 2 usage error,
//! 3 I/O error, 4 invalid config, 5 malformed model file.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::analysis::{bench_sparse_scaling, cost_report, expert_similarity, route_stats, write_bench_csv};
use crate::checkpoint::{decode, encode, read_dense, read_moe, write_model, Checkpoint};
use crate::config::{FineRConfig, Preset};
use crate::error::{Error, Result};
use crate::experts::SwiGluWeights;
use crate::loss_grad::{fd_check, loss_and_grad, sgd_step, FdOptions, MeanSquare, RegressionWithBalance, BALANCE_ALPHA};
use crate::moe_layer::{forward_forced_sparse, MoEModel};
use crate::numerics::{Matrix, Rng};
use crate::oracle::{dense_ffn_forward, route_reference};
use crate::router::route;
use crate::upcycle::{drop_upcycle, upcycle};

#[derive(Debug, Parser)]
#[command(name = "finermoe", version, about = "Fine-grained MoE layer: upcycling, routing, verification")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = "FINERMOE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print a baseline config.
    Preset {
        name: String,
        #[arg(long, default_value_t = crate::config::REFERENCE_HIDDEN)]
        hidden: usize,
        #[arg(long, default_value_t = crate::config::REFERENCE_INTERMEDIATE)]
        intermediate: usize,
    },
    /// Write a random dense FFN.
    InitDense {
        #[arg(long)]
        hidden: usize,
        #[arg(long)]
        intermediate: usize,
        #[arg(long, default_value_t = 0.02)]
        std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a dense FFN into a MoE layer.
    Upcycle {
        #[arg(long, required_unless_present = "drop_ratio")]
        config: Option<PathBuf>,
        #[arg(long)]
        dense: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replicate and partially re-initialise instead.
        #[arg(long, requires_all = ["experts", "active"])]
        drop_ratio: Option<f64>,
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long)]
        active: Option<usize>,
    },
    /// Run the layer on a matrix file.
    Forward {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Expert load over random tokens.
    RouteStats {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 4096)]
        tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Mean pairwise cosine similarity of the experts.
    Similarity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Parameter/FLOP counts, and timings when `--timed`.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 256)]
        tokens: usize,
        #[arg(long)]
        timed: bool,
        /// Also time the sparse path for T_I in 1, 2, 4.
        #[arg(long)]
        scaling: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Oracle suites; exits 0 only if all pass.
    Check {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Defaults to the base preset at h=64, H=128.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Short training run on a synthetic regression target.
    TrainDemo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Columns: step,lm_loss,balance_loss.
        #[arg(long)]
        csv: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Reconstruction,
    Router,
    Roundtrip,
    Gradient,
    All,
}

/// Outcome of one check suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub metric: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl SuiteReport {
    fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("{} {}={:.3e} threshold={:.0e} {verdict}", self.name, self.metric, self.value, self.threshold)
    }
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let stdout = io::stdout();
    let stderr = io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, A>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let mut buf = Vec::new();
    let result = match cli.threads {
        Some(0) => Err(Error::InvalidArgument("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
            .and_then(|pool| pool.install(|| dispatch(cli.command, &mut buf))),
        None => dispatch(cli.command, &mut buf),
    };
    let _ = out.write_all(&buf);
    match result {
        Ok(true) => 0,
        Ok(false) => {
            let _ = writeln!(err, "error: check failed");
            1
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 3,
        Error::Config(_) => 4,
        Error::Format(_) => 5,
        _ => 1,
    }
}

fn emit(out: &mut Vec<u8>, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn load_config(path: &Path) -> Result<FineRConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(FineRConfig::parse(&text)?)
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn dispatch(cmd: Command, out: &mut Vec<u8>) -> Result<bool> {
    match cmd {
        Command::Preset {
            name,
            hidden,
            intermediate,
        } => {
            let cfg = name.parse::<Preset>()?.config(hidden, intermediate);
            cfg.validate()?;
            emit(out, &cfg.to_text())?;
        }
        Command::InitDense {
            hidden,
            intermediate,
            std,
            seed,
            out: path,
        } => {
            let dense = SwiGluWeights::<f32>::random(hidden, intermediate, hidden, std, &mut Rng::new(seed));
            write_model(dense, &path)?;
            emit(out, &format!("wrote {}\n", path.display()))?;
        }
        Command::Upcycle {
            config,
            dense,
            out: path,
            seed,
            drop_ratio,
            experts,
            active,
        } => {
            let d = read_dense(&dense)?;
            let model = match (drop_ratio, config) {
                (Some(r), _) => drop_upcycle(&d, experts.unwrap_or(0), r, active.unwrap_or(0), seed)?,
                (None, Some(c)) => upcycle(&d, &load_config(&c)?, seed)?,
                (None, None) => return Err(Error::InvalidArgument("--config is required".into())),
            };
            let dims = model.dims();
            write_model(model, &path)?;
            emit(
                out,
                &format!(
                    "wrote {}\nexperts={}\nactive_per_token={}\n",
                    path.display(),
                    dims.n_experts,
                    dims.n_active
                ),
            )?;
        }
        Command::Forward { model, input, output } => {
            let m = read_moe(&model)?;
            let x = read_matrix_file(&input)?;
            let y = m.forward(&x)?.y;
            write_matrix_file(&output, &y)?;
            emit(out, &format!("rows={}\ncols={}\n", y.rows(), y.cols()))?;
        }
        Command::RouteStats { model, tokens, seed, csv } => {
            let m = read_moe(&model)?;
            let mut rng = Rng::new(seed);
            let mut decisions = Vec::new();
            let mut left = tokens;
            while left > 0 {
                let n = left.min(1024);
                let x: Matrix = rng.normal_matrix(n, m.cfg.hidden, 1.0);
                decisions.push(m.route_tokens(&x)?);
                left -= n;
            }
            let report = route_stats(&decisions)?;
            emit(out, &report.to_kv())?;
            if let Some(p) = csv {
                report.write_csv(create(&p)?)?;
            }
        }
        Command::Similarity { model, csv } => {
            let report = expert_similarity(&read_moe(&model)?)?;
            emit(out, &report.to_kv())?;
            if let Some(p) = csv {
                report.write_csv(create(&p)?)?;
            }
        }
        Command::Bench {
            config,
            tokens,
            timed,
            scaling,
            csv,
        } => {
            let cfg = load_config(&config)?;
            emit(out, &cost_report(&cfg, tokens, timed)?.to_kv())?;
            if scaling {
                let points = bench_sparse_scaling(cfg.hidden, cfg.intermediate, 8, &[1, 2, 4], tokens, 3, 0)?;
                for p in &points {
                    emit(out, &format!("t_i={} secs={:.3e} secs_per_active={:.3e}\n", p.t_i, p.secs, p.secs_per_active()))?;
                }
                if let Some(path) = csv {
                    write_bench_csv(&points, create(&path)?)?;
                }
            }
        }
        Command::Check { suite, config, seed } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => Preset::FineRMoEBase.config(64, 128),
            };
            let mut ok = true;
            for r in run_suites(suite, &cfg, seed)? {
                emit(out, &format!("{}\n", r.line()))?;
                ok &= r.passed;
            }
            emit(out, if ok { "PASS\n" } else { "FAIL\n" })?;
            return Ok(ok);
        }
        Command::TrainDemo {
            config,
            steps,
            batch,
            lr,
            seed,
            csv,
        } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => Preset::FineRMoEBase.config(64, 128),
            };
            let rows = train_demo(&cfg, steps, batch, lr, seed)?;
            let mut w = csv::Writer::from_writer(create(&csv)?);
            let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
            w.write_record(["step", "lm_loss", "balance_loss"]).map_err(csv_err)?;
            for r in &rows {
                w.serialize(r).map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::io(&csv, e))?;
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                emit(out, &format!("steps={}\nfirst_lm_loss={}\nlast_lm_loss={}\n", rows.len(), first.1, last.1))?;
            }
        }
    }
    Ok(true)
}

/// Run one suite, or all four for [`Suite::All`].
pub fn run_suites(suite: Suite, cfg: &FineRConfig, seed: u64) -> Result<Vec<SuiteReport>> {
    cfg.validate()?;
    let all = [Suite::Reconstruction, Suite::Router, Suite::Roundtrip, Suite::Gradient];
    let chosen: Vec<Suite> = if suite == Suite::All { all.to_vec() } else { vec![suite] };
    chosen
        .into_iter()
        .map(|s| match s {
            Suite::Reconstruction => check_reconstruction(cfg, seed),
            Suite::Router => check_router(cfg, seed),
            Suite::Roundtrip => check_roundtrip(cfg, seed),
            Suite::Gradient => check_gradient(cfg, seed),
            Suite::All => unreachable!(),
        })
        .collect()
}

/// Forced sparse path against the dense oracle; with `R_I > 1` every slice
/// is summed `R_I` times.
fn check_reconstruction(cfg: &FineRConfig, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed);
    let dense = SwiGluWeights::<f32>::random(cfg.hidden, cfg.intermediate, cfg.hidden, 0.05, &mut rng);
    let model = upcycle(&dense, cfg, seed)?;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x: Matrix = rng.normal_matrix(4, cfg.hidden, 1.0);
        let want = dense_ffn_forward(&x, &dense)?.scale(cfg.r_i as f32);
        worst = worst.max(forward_forced_sparse(&x, &model)?.max_rel_diff(&want)?);
    }
    Ok(SuiteReport {
        name: "reconstruction",
        metric: "max_rel_error".into(),
        value: worst,
        threshold: 1e-5,
        passed: worst < 1e-5,
    })
}

fn check_router(cfg: &FineRConfig, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed);
    let n = cfg.dims()?.n_experts;
    let mut mismatches = 0;
    for _ in 0..1000 {
        let mut s: Matrix = rng.uniform_matrix(4, n, 0.0, 1.0);
        crate::router::softmax_rows(&mut s)?;
        if route(&s, cfg)? != route_reference(&s, cfg)? {
            mismatches += 1;
        }
    }
    Ok(SuiteReport {
        name: "router",
        metric: "mismatches".into(),
        value: mismatches as f64,
        threshold: 1.0,
        passed: mismatches == 0,
    })
}

fn check_roundtrip(cfg: &FineRConfig, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed);
    let mut failures = 0;
    for _ in 0..10 {
        let model = MoEModel::<f32>::random(*cfg, 0.1, &mut rng)?;
        let back = match decode(&encode(&Checkpoint::Moe(model.clone()))?)? {
            Checkpoint::Moe(m) => m,
            Checkpoint::Dense(_) => return Err(Error::InvalidArgument("round trip changed kind".into())),
        };
        let x: Matrix = rng.normal_matrix(3, cfg.hidden, 1.0);
        if back != model || back.forward(&x)?.y != model.forward(&x)?.y {
            failures += 1;
        }
    }
    Ok(SuiteReport {
        name: "roundtrip",
        metric: "failures".into(),
        value: failures as f64,
        threshold: 1.0,
        passed: failures == 0,
    })
}

fn check_gradient(cfg: &FineRConfig, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed);
    let mut model = MoEModel::<f64>::random(*cfg, 1.0 / (cfg.hidden as f64).sqrt(), &mut rng)?;
    model.router.weight = rng.normal_matrix(cfg.hidden, model.router.n_out(), 1.0);
    let x = rng.normal_matrix(3, cfg.hidden, 1.0);
    let report = fd_check(
        &x,
        &model,
        &MeanSquare,
        FdOptions {
            seed,
            samples_per_tensor: 2,
            ..FdOptions::default()
        },
    )?;
    Ok(SuiteReport {
        name: "gradient",
        metric: "max_rel_error".into(),
        value: report.max_rel_error,
        threshold: 1e-4,
        passed: report.max_rel_error < 1e-4 && report.checked > 0,
    })
}

/// Train an upcycled layer towards a fixed random teacher FFN and return
/// `(step, lm_loss, balance_loss)` per step.
pub fn train_demo(cfg: &FineRConfig, steps: usize, batch: usize, lr: f64, seed: u64) -> Result<Vec<(usize, f64, f64)>> {
    let mut rng = Rng::new(seed);
    let dense = SwiGluWeights::<f32>::random(cfg.hidden, cfg.intermediate, cfg.hidden, 0.1, &mut rng);
    let teacher = SwiGluWeights::<f32>::random(cfg.hidden, cfg.intermediate, cfg.hidden, 0.1, &mut rng);
    let mut model = upcycle(&dense, cfg, seed)?;
    let mut rows = Vec::with_capacity(steps);
    for step in 0..steps {
        let x: Matrix = rng.normal_matrix(batch, cfg.hidden, 1.0);
        let objective = RegressionWithBalance {
            target: teacher.forward(&x)?,
            alpha: BALANCE_ALPHA,
        };
        let (_, grads, decision) = loss_and_grad(&x, &model, &objective)?;
        let y = model.forward(&x)?.y;
        let lm = objective.mse(&y)?;
        let bal = crate::loss_grad::balance_loss(&decision, BALANCE_ALPHA)?.loss;
        rows.push((step, lm, bal));
        sgd_step(&mut model, &grads, lr)?;
    }
    Ok(rows)
}

pub fn encode_matrix(m: &Matrix<f32>) -> Vec<u8> {
    let mut bytes = format!("{} {}\n", m.rows(), m.cols()).into_bytes();
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix<f32>> {
    let bad = |msg: &str| Error::InvalidArgument(format!("matrix file: {msg}"));
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad("header must be `rows cols`")))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(bad("header must be `rows cols`"));
    };
    let payload = &bytes[nl + 1..];
    if payload.len() != rows * cols * 4 {
        return Err(bad(&format!("expected {} payload bytes, found {}", rows * cols * 4, payload.len())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Matrix::new(rows, cols, data)
}

pub fn read_matrix_file(path: &Path) -> Result<Matrix<f32>> {
    decode_matrix(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_matrix_file(path: &Path, m: &Matrix<f32>) -> Result<()> {
    fs::write(path, encode_matrix(m)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(std::iter::once("finermoe").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn matrix_file_round_trip() {
        let m = Rng::new(1).normal_matrix::<f32>(3, 5, 1.0);
        let bytes = encode_matrix(&m);
        assert!(bytes.starts_with(b"3 5\n"));
        assert_eq!(decode_matrix(&bytes).unwrap(), m);
        assert!(decode_matrix(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_matrix(b"3\n").is_err());
    }

    #[test]
    fn preset_prints_config() {
        let (code, out, _) = run_args(&["preset", "finermoe-base"]);
        assert_eq!(code, 0);
        assert_eq!(FineRConfig::parse(&out).unwrap(), Preset::FineRMoEBase.reference_config());
    }

    #[test]
    fn distinct_failures() {
        let (code, _, err) = run_args(&["preset", "nope"]);
        assert_eq!(code, 4);
        assert!(err.contains("unknown preset"), "{err}");
        let (code, _, err) = run_args(&["similarity", "--model", "/nonexistent/m.frm"]);
        assert_eq!(code, 3);
        assert!(err.contains("/nonexistent/m.frm"));
        let (code, _, err) = run_args(&["forward", "--bogus"]);
        assert_eq!(code, 2);
        assert!(err.contains("--bogus"));
        let (code, _, _) = run_args(&["--help"]);
        assert_eq!(code, 0);
    }

    #[test]
    fn bad_model_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.frm");
        fs::write(&p, b"not a model").unwrap();
        let (code, _, err) = run_args(&["similarity", "--model", p.to_str().unwrap()]);
        assert_eq!(code, 5, "{err}");
    }

    #[test]
    fn check_suites_pass_on_default() {
        let (code, out, _) = run_args(&["check", "--suite", "all", "--seed", "7"]);
        assert_eq!(code, 0, "{out}");
        assert_eq!(out.matches("PASS").count(), 5);
    }

    #[test]
    fn train_demo_lowers_loss() {
        let cfg = FineRConfig::new(16, 32, 4, 1, 2, 2, 1);
        let rows = train_demo(&cfg, 60, 32, 0.05, 1).unwrap();
        let head: f64 = rows[..10].iter().map(|r| r.1).sum();
        let tail: f64 = rows[50..].iter().map(|r| r.1).sum();
        assert!(tail < head, "{head} -> {tail}");
        assert!(rows.iter().all(|r| r.2 > 0.0));
    }
}
