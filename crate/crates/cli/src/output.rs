//! Data emission: CSV tables with a two-line header (names, units), JSON
//! records for scalar results, the run manifest, and the optional gnuplot
//! convenience script.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;

use lattice_echo::analysis::{FitResult, SignalTrace};

/// Collects everything needed to reproduce a run bit-exactly.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config: crate::config::RunConfig,
    pub base_seed: u64,
    pub seed_rule: String,
    pub wall_time_s: f64,
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

pub struct Emitter {
    dir: PathBuf,
    command: String,
    config: crate::config::RunConfig,
    started: Instant,
    outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl Emitter {
    pub fn new(command: &str, config: &crate::config::RunConfig) -> anyhow::Result<Self> {
        let dir = config.output.dir.clone();
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir,
            command: command.into(),
            config: config.clone(),
            started: Instant::now(),
            outputs: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn track(&mut self, path: PathBuf) -> PathBuf {
        self.outputs.push(path.clone());
        path
    }

    /// CSV with a two-line header. Columns are (name, unit, values).
    pub fn write_csv(
        &mut self,
        name: &str,
        columns: &[(&str, &str, &[f64])],
    ) -> anyhow::Result<PathBuf> {
        let path = self.track(self.path(name));
        let mut f = std::fs::File::create(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        let names: Vec<&str> = columns.iter().map(|c| c.0).collect();
        let units: Vec<&str> = columns.iter().map(|c| c.1).collect();
        writeln!(f, "{}", names.join(","))?;
        writeln!(f, "{}", units.join(","))?;
        let rows = columns.first().map_or(0, |c| c.2.len());
        for c in columns {
            anyhow::ensure!(c.2.len() == rows, "ragged CSV columns in {name}");
        }
        for r in 0..rows {
            let row: Vec<String> = columns.iter().map(|c| format_value(c.2[r])).collect();
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(path)
    }

    /// Trace CSV: time plus value columns.
    pub fn write_trace_csv(
        &mut self,
        name: &str,
        trace: &SignalTrace,
        extra: &[(&str, &str, &[f64])],
    ) -> anyhow::Result<PathBuf> {
        let times_us: Vec<f64> = trace.times().iter().map(|t| t * 1e6).collect();
        let mut columns: Vec<(&str, &str, &[f64])> = vec![
            ("time", "us", &times_us),
            ("signal_mean", "dimensionless", trace.values()),
        ];
        let stderr_holder: Vec<f64>;
        if let Some(se) = trace.stderr() {
            stderr_holder = se.to_vec();
            columns.push(("signal_stderr", "dimensionless", &stderr_holder));
        }
        columns.extend_from_slice(extra);
        self.write_csv(name, &columns)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let path = self.track(self.path(name));
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(&path, text + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Gnuplot script that plots every CSV emitted so far.
    pub fn write_gnuplot(&mut self, name: &str) -> anyhow::Result<PathBuf> {
        let mut body = String::from(
            "set datafile separator ','\nset key autotitle columnhead\nset xlabel 'time (us)'\n",
        );
        for p in self
            .outputs
            .clone()
            .iter()
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        {
            let file = p.file_name().unwrap().to_string_lossy().into_owned();
            body.push_str(&format!(
                "plot '{file}' every ::1 using 1:2 with lines\npause -1 'press enter'\n"
            ));
        }
        let path = self.track(self.path(name));
        std::fs::write(&path, body)?;
        Ok(path)
    }

    pub fn finish(mut self, base_seed: u64) -> anyhow::Result<()> {
        // Resolved configuration for bit-exact reproduction.
        let cfg_path = self.track(self.path("config_resolved.toml"));
        std::fs::write(&cfg_path, self.config.to_toml()?)?;
        let manifest = RunManifest {
            command: self.command.clone(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            config: self.config.clone(),
            base_seed,
            seed_rule: "trajectory i uses seed = base_seed xor i".into(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs.clone(),
            warnings: self.warnings.clone(),
        };
        let path = self.path("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n")?;
        Ok(())
    }
}

/// Deterministic float formatting shared by every CSV cell.
pub fn format_value(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else {
        format!("{v:.9e}")
    }
}

/// Serializable fit summary.
#[derive(Debug, Serialize)]
pub struct FitReport {
    pub status: String,
    pub converged: bool,
    pub suspicious: bool,
    pub residual_rms: f64,
    pub parameters: Vec<FitParam>,
}

#[derive(Debug, Serialize)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    pub sigma: f64,
}

impl FitReport {
    pub fn from_fit(fit: &FitResult) -> Self {
        Self {
            status: "ok".into(),
            converged: fit.converged,
            suspicious: fit.suspicious,
            residual_rms: fit.residual_rms,
            parameters: fit
                .names
                .iter()
                .zip(fit.values.iter().zip(&fit.sigmas))
                .map(|(n, (v, s))| FitParam {
                    name: (*n).into(),
                    value: *v,
                    sigma: *s,
                })
                .collect(),
        }
    }

    pub fn failed(status: String) -> Self {
        Self {
            status,
            converged: false,
            suspicious: false,
            residual_rms: f64::NAN,
            parameters: Vec::new(),
        }
    }
}

