//! Configuration files, result tables, run manifests and SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::lab::{
    lossless, preset_plan, rate_table, ConvergenceReport, EpsilonPolicy, ExperimentPlan, FpResolution, LabError,
    PlanChecks, SlopeFit, DT_HALVING_TOL, FP_REFINEMENT_TOL,
};
use crate::meanfield::DensityEvolution;
use crate::model::{gridcell_params, ou_params, GridCellParams};
use crate::noise::MollifierProfile;
use crate::particles::{InitialDataSpec, LacunaryProfile};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Invalid(#[from] LabError),
    #[error("plot: {0}")]
    Plot(String),
}

impl IoError {
    /// Bad input as opposed to a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(self, IoError::Parse { .. } | IoError::UnknownPreset(_) | IoError::Invalid(LabError::Plan { .. }))
            || matches!(self, IoError::Invalid(LabError::Model(_)) | IoError::Invalid(LabError::Particle(_)))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

/// Every preset a config may name.
pub const PRESETS: [&str; 5] = ["gridcell-concrete", "ou-test", "rate-in-M", "rate-in-N", "empirical-measure"];

/// Plan of a named preset.
pub fn preset(name: &str) -> Result<ExperimentPlan, IoError> {
    if let Some(p) = preset_plan(name) {
        return Ok(p);
    }
    let small = |model: GridCellParams, initial: InitialDataSpec, cells: Vec<[usize; 2]>| ExperimentPlan {
        preset: name.into(),
        model,
        initial,
        cells,
        horizon: 1.0,
        dt: 1.0 / 64.0,
        epsilon: EpsilonPolicy::Linked,
        mollifier: MollifierProfile::Bump,
        replicas: 8,
        master_seed: crate::DEFAULT_SEED,
        fp: FpResolution { side: None, n_u: 200, u_max: 3.0, dt: None },
        record_times: None,
        checks: PlanChecks::default(),
    };
    match name {
        "gridcell-concrete" => Ok(small(
            gridcell_params(),
            InitialDataSpec { alpha: 1.0, n_modes: 8, amplitude: 0.5, offset: 0.0, profile: LacunaryProfile::NONE },
            vec![[16, 8]],
        )),
        "ou-test" => {
            let mut p = small(
                ou_params(0.3, 0.5, 1.0),
                InitialDataSpec { alpha: 1.0, n_modes: 0, amplitude: 0.0, offset: 0.0, profile: LacunaryProfile::NONE },
                vec![[100, 100]],
            );
            p.horizon = 10.0;
            p.dt = 1.0 / 400.0;
            p.fp.n_u = 400;
            p.fp.u_max = 3.0;
            Ok(p)
        }
        other => Err(IoError::UnknownPreset(other.into())),
    }
}

/// On-disk configuration: a preset name plus optional overrides.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicas: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_times: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mollifier: Option<MollifierProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<EpsilonPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp: Option<FpResolution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checks: Option<PlanChecks>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialDataSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<GridCellParams>,
}

impl ConfigFile {
    /// Applies the overrides to the preset plan and validates the result.
    pub fn resolve(&self) -> Result<ExperimentPlan, IoError> {
        let mut p = preset(&self.preset)?;
        if let Some(m) = &self.model {
            p.model = m.clone();
        }
        if let Some(i) = &self.initial {
            p.initial = i.clone();
        }
        if let Some(d) = self.dim {
            p.model.dim = d;
        }
        if let Some(b) = self.orientations {
            p.model.orientations = b;
        }
        if let Some(a) = self.alpha {
            p.initial.alpha = a;
        }
        if let Some(s) = self.sigma {
            p.model.sigma = s;
        }
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { p.$f = v.clone(); } )* };
        }
        take!(cells, horizon, dt, replicas, master_seed, mollifier, epsilon, fp, checks);
        if let Some(r) = &self.record_times {
            p.record_times = Some(r.clone());
        }
        p.validate()?;
        Ok(p)
    }

    /// Config that reproduces `plan` exactly.
    pub fn from_plan(plan: &ExperimentPlan) -> Self {
        ConfigFile {
            preset: plan.preset.clone(),
            cells: Some(plan.cells.clone()),
            horizon: Some(plan.horizon),
            dt: Some(plan.dt),
            replicas: Some(plan.replicas),
            master_seed: Some(plan.master_seed),
            record_times: plan.record_times.clone(),
            mollifier: Some(plan.mollifier),
            epsilon: Some(plan.epsilon),
            fp: Some(plan.fp),
            checks: Some(plan.checks),
            initial: Some(plan.initial.clone()),
            model: Some(plan.model.clone()),
            ..Default::default()
        }
    }
}

/// Parses config text; `origin` names the source in errors.
pub fn parse_config(text: &str, origin: &Path) -> Result<ExperimentPlan, IoError> {
    let cfg: ConfigFile =
        toml::from_str(text).map_err(|e| IoError::Parse { path: origin.to_path_buf(), message: e.to_string() })?;
    if !PRESETS.contains(&cfg.preset.as_str()) {
        return Err(IoError::UnknownPreset(cfg.preset));
    }
    cfg.resolve()
}

/// Reads and validates a TOML config; unknown keys are rejected.
pub fn load_config(path: &Path) -> Result<ExperimentPlan, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text, path)
}

/// TOML text that [`parse_config`] turns back into `plan`.
pub fn plan_to_toml(plan: &ExperimentPlan) -> String {
    toml::to_string(&ConfigFile::from_plan(plan)).expect("plan serializes")
}

/// SHA-256 of the plan's canonical JSON.
pub fn plan_hash(plan: &ExperimentPlan) -> String {
    sha256_hex(serde_json::to_string(plan).expect("plan serializes").as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub code_version: String,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    pub tolerances: BTreeMap<String, f64>,
    pub files: Vec<OutputFile>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Collects output files with checksums; the manifest goes last.
pub struct ResultWriter {
    dir: PathBuf,
    started: f64,
    files: Vec<OutputFile>,
}

impl ResultWriter {
    pub fn new(dir: &Path) -> Result<Self, IoError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self { dir: dir.to_path_buf(), started: now(), files: vec![] })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, IoError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.files.retain(|f| f.path != name);
        self.files.push(OutputFile { path: name.into(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(path)
    }

    pub fn files(&self) -> &[OutputFile] {
        &self.files
    }

    pub fn finish(self, config_hash: String, master_seed: u64) -> Result<RunManifest, IoError> {
        let tolerances = BTreeMap::from([
            ("dt_halving_rel".to_string(), DT_HALVING_TOL),
            ("fp_refinement_rel".to_string(), FP_REFINEMENT_TOL),
            ("triangle_abs".to_string(), TRIANGLE_TOL),
        ]);
        let manifest = RunManifest {
            config_hash,
            master_seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            started: self.started,
            finished: now(),
            tolerances,
            files: self.files,
        };
        let path = self.dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

/// Slack allowed in the triangle inequality of the splitting.
pub const TRIANGLE_TOL: f64 = 1e-9;

pub const WASSERSTEIN_COLUMNS: [&str; 13] = [
    "N",
    "M",
    "t",
    "coupling",
    "coupling_se",
    "coupling_subsampled",
    "coupling_subsampled_spread",
    "sampling",
    "sampling_se",
    "riemann",
    "total",
    "total_se",
    "triangle_slack",
];

pub fn wasserstein_csv(report: &ConvergenceReport) -> String {
    let mut s = WASSERSTEIN_COLUMNS.join(",");
    s.push('\n');
    for r in &report.splitting {
        let vals = [
            r.t,
            r.coupling,
            r.coupling_se,
            r.coupling_subsampled,
            r.coupling_subsampled_spread,
            r.sampling,
            r.sampling_se,
            r.riemann,
            r.total,
            r.total_se,
            r.triangle_slack,
        ];
        let _ = write!(s, "{},{}", r.n, r.m);
        for v in vals {
            let _ = write!(s, ",{}", lossless(v));
        }
        s.push('\n');
    }
    s
}

/// Reference density at every record time, one row per cell.
pub fn density_csv(fp: &DensityEvolution) -> String {
    let mut s = String::from("t,node,beta,u,mass\n");
    let centers = fp.ucells.centers();
    for (r, &t) in fp.record_times.iter().enumerate() {
        for p in 0..fp.xgrid.n {
            for b in 0..fp.orientations {
                for (c, v) in fp.marginal(r, p, b).iter().enumerate() {
                    let _ = writeln!(s, "{},{p},{b},{},{}", lossless(t), lossless(centers[c]), lossless(*v));
                }
            }
        }
    }
    s
}

/// Parses a numeric CSV with a header row; empty fields read as NaN.
pub fn read_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), String> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().ok_or("empty file")?.split(',').map(String::from).collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let row: Vec<f64> = l
                .split(',')
                .map(|f| if f.is_empty() { Ok(f64::NAN) } else { f.parse::<f64>() })
                .collect::<Result<_, _>>()
                .map_err(|e| format!("{l:?}: {e}"))?;
            if row.len() != header.len() {
                return Err(format!("{l:?}: expected {} fields", header.len()));
            }
            Ok(row)
        })
        .collect::<Result<_, _>>()?;
    Ok((header, rows))
}

/// Adds `errors.csv`, `wasserstein.csv`, `summary.json`, `table.txt` and,
/// when a reference is given, `density.csv`.
pub fn write_report(
    w: &mut ResultWriter,
    report: &ConvergenceReport,
    reference: Option<&DensityEvolution>,
) -> Result<(), IoError> {
    let table = rate_table(report);
    w.write("errors.csv", table.csv.as_bytes())?;
    w.write("wasserstein.csv", wasserstein_csv(report).as_bytes())?;
    if let Some(fp) = reference {
        w.write("density.csv", density_csv(fp).as_bytes())?;
    }
    let summary = serde_json::json!({ "summary": table.summary, "report": report });
    w.write("summary.json", serde_json::to_string_pretty(&summary).expect("report serializes").as_bytes())?;
    w.write("table.txt", table.text.as_bytes())?;
    Ok(())
}

/// Writes the report tables, then the manifest.
pub fn write_results(
    report: &ConvergenceReport,
    plan: &ExperimentPlan,
    reference: Option<&DensityEvolution>,
    out_dir: &Path,
) -> Result<RunManifest, IoError> {
    let mut w = ResultWriter::new(out_dir)?;
    write_report(&mut w, report, reference)?;
    w.finish(plan_hash(plan), plan.master_seed)
}

/// One data series of a log-log plot.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub fit: Option<SlopeFit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotStyle {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Reference slopes drawn through the first point of the first series.
    pub guides: Vec<(String, f64)>,
    pub width: f64,
    pub height: f64,
}

impl PlotStyle {
    /// Guides at `−1/2`, `−α/d` and `−1/4`.
    pub fn with_rate_guides(title: &str, x_label: &str, alpha: f64, dim: usize) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: "error".into(),
            guides: vec![
                ("-1/2".into(), -0.5),
                (format!("-alpha/d = {:.3}", -alpha / dim as f64), -alpha / dim as f64),
                ("-1/4".into(), -0.25),
            ],
            width: 640.0,
            height: 480.0,
        }
    }
}

/// Margin around the plot area, in pixels.
pub const PLOT_MARGIN: f64 = 60.0;

/// Log-log axes with one pixel scale per decade on both axes, so a line of
/// slope `s` has pixel rise over run `−s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogAxes {
    pub x_min: f64,
    pub y_min: f64,
    pub px_per_decade: f64,
    pub origin: (f64, f64),
}

impl LogAxes {
    pub fn fit(points: &[(f64, f64)], width: f64, height: f64) -> Self {
        let lx: Vec<f64> = points.iter().map(|p| p.0.log10()).collect();
        let ly: Vec<f64> = points.iter().map(|p| p.1.log10()).collect();
        let span = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo - 0.25, (hi - lo).max(0.5) + 0.5)
        };
        let (x_min, xr) = span(&lx);
        let (y_min, yr) = span(&ly);
        let px = ((width - 2.0 * PLOT_MARGIN) / xr).min((height - 2.0 * PLOT_MARGIN) / yr);
        Self { x_min, y_min, px_per_decade: px, origin: (PLOT_MARGIN, height - PLOT_MARGIN) }
    }

    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.origin.0 + (x.log10() - self.x_min) * self.px_per_decade,
            self.origin.1 - (y.log10() - self.y_min) * self.px_per_decade,
        )
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Static log-log SVG; identical inputs give identical bytes.
pub fn render_svg(series: &[PlotSeries], style: &PlotStyle) -> Result<String, IoError> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().cloned()).collect();
    if all.is_empty() {
        return Err(IoError::Plot("no points to plot".into()));
    }
    if let Some(p) = all.iter().find(|p| !(p.0 > 0.0 && p.1 > 0.0 && p.0.is_finite() && p.1.is_finite())) {
        return Err(IoError::Plot(format!("point ({}, {}) cannot go on log axes", p.0, p.1)));
    }
    let ax = LogAxes::fit(&all, style.width, style.height);
    let (w, h) = (style.width, style.height);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        w / 2.0,
        escape(&style.title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{}</text>"#,
        w / 2.0,
        h - 16.0,
        escape(&style.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {:.2})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(&style.y_label)
    );
    let _ = writeln!(
        s,
        r#"<path class="axes" d="M {:.4} {:.4} L {:.4} {:.4} L {:.4} {:.4}" stroke="black" fill="none"/>"#,
        PLOT_MARGIN,
        PLOT_MARGIN,
        PLOT_MARGIN,
        h - PLOT_MARGIN,
        w - PLOT_MARGIN,
        h - PLOT_MARGIN
    );
    let x_max = all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let x_lo = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_hi = if x_max > x_lo { x_max } else { x_lo * 10f64.sqrt() };
    let anchor = series.iter().find_map(|s| s.points.first().cloned()).expect("nonempty");
    for (gi, (label, slope)) in style.guides.iter().enumerate() {
        let y_at = |x: f64| anchor.1 * (x / anchor.0).powf(*slope);
        let (a, b) = (ax.map(x_lo, y_at(x_lo)), ax.map(x_hi, y_at(x_hi)));
        let _ = writeln!(
            s,
            r##"<path class="guide" data-slope="{slope}" d="M {:.4} {:.4} L {:.4} {:.4}" stroke="#888" stroke-dasharray="{} 4" fill="none"/>"##,
            a.0,
            a.1,
            b.0,
            b.1,
            4 + 2 * gi
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{:.2}" font-size="11" fill="#666">{}</text>"##,
            b.0 + 4.0,
            b.1,
            escape(label)
        );
    }
    for (si, ser) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        for &(x, y) in &ser.points {
            let (px, py) = ax.map(x, y);
            let _ = writeln!(s, r#"<circle cx="{px:.4}" cy="{py:.4}" r="4" fill="{color}"/>"#);
        }
        if let Some(f) = &ser.fit {
            let y_at = |x: f64| (f.intercept + f.slope * x.ln()).exp();
            let (a, b) = (ax.map(x_lo, y_at(x_lo)), ax.map(x_hi, y_at(x_hi)));
            let _ = writeln!(
                s,
                r#"<path class="fit" d="M {:.4} {:.4} L {:.4} {:.4}" stroke="{color}" fill="none"/>"#,
                a.0, a.1, b.0, b.1
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" fill="{color}">{}</text>"#,
            w - PLOT_MARGIN - 150.0,
            PLOT_MARGIN + 16.0 * (si as f64 + 1.0),
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_plot(series: &[PlotSeries], style: &PlotStyle, path: &Path) -> Result<(), IoError> {
    let svg = render_svg(series, style)?;
    fs::write(path, svg).map_err(io_err(path))
}

/// Error-versus-scale series of a report, with its fit when present.
pub fn error_series(report: &ConvergenceReport, by_m: bool) -> PlotSeries {
    let name = if by_m { "error-vs-M" } else { "error-vs-N" };
    PlotSeries {
        label: "e(N, M)".into(),
        points: report.errors.iter().map(|c| (if by_m { c.m } else { c.n } as f64, c.error)).collect(),
        fit: report.slope(name).copied(),
    }
}
