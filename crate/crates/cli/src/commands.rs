use std::path::{Path, PathBuf};

use mmtomo::fitting::{fit_coherent_alpha, fit_fock_distribution, fit_fock_distribution_restricted, fit_thermal_nbar, FockDistribution};
use mmtomo::fockspace::{DensityMatrix, HilbertConfig};
use mmtomo::dynamics::RabiCalibration;
use mmtomo::linalg::derive_seed;
use mmtomo::measurement::{corrupt_and_sample, exact_scan, sample_populations, uniform_times, TimeScanData};
use mmtomo::pipeline::exact_grid_scans;
use mmtomo::reconstruction::{reconstruct, DisplacementGrid, QDataset, ReconstructedState};
use mmtomo::verification::{calibrate_spin_phase, parity_phase_scan, phase_grid};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::io::{read_document, setting_tag, Writer};

pub const SCAN: &str = "scan.json";
pub const GRID_MANIFEST: &str = "grid_manifest.json";
pub const Q_MANIFEST: &str = "q_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub setting: Vec<i32>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub grid: DisplacementGrid,
    #[serde(default)]
    pub k_max: Option<usize>,
    pub entries: Vec<ManifestEntry>,
}

pub struct Context {
    pub config: PipelineConfig,
    pub seed: u64,
    pub writer: Writer,
}

fn fock_csv(dist: &FockDistribution) -> String {
    let mut out: String = (0..dist.num_modes).map(|j| format!("k{j},")).collect();
    out.push_str("p,sigma\n");
    for (k, v) in dist.indices.iter().zip(&dist.values) {
        for kj in k {
            out.push_str(&format!("{kj},"));
        }
        out.push_str(&format!("{v},{}\n", dist.sigma(k)));
    }
    out
}

pub fn simulate(ctx: &mut Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let readout = cfg.readout()?;
    let rho = cfg.prepared_density()?;
    let mut scan = corrupt_and_sample(
        &exact_scan(&rho, &readout.calibration, &readout.times)?,
        &cfg.sample_options(ctx.seed),
    )?;
    scan.metadata.label = cfg.name.clone();
    ctx.writer.json(SCAN, "time_scan", &scan)?;
    ctx.writer.csv("scan.csv", &scan.to_csv())?;
    println!("simulated {} time points for '{}'", scan.times.len(), cfg.name);

    if cfg.reconstruction.is_some() {
        let (grid, rec) = cfg.grid()?;
        let k_max = cfg.fit.as_ref().map_or(rec.n_max, |f| f.k_max);
        let scans = exact_grid_scans(&rho, &grid, k_max, &cfg.preparation.calibration, &readout, rec.two_tone)?;
        let mut entries = Vec::new();
        for (i, (setting, exact)) in scans.iter().enumerate() {
            let mut sampled = corrupt_and_sample(exact, &cfg.sample_options(derive_seed(ctx.seed, i as u64)))?;
            sampled.metadata.label = format!("{} {setting:?}", cfg.name);
            let tag = setting_tag(setting);
            let file = format!("grid/scan_{tag}.json");
            ctx.writer.json(&file, "time_scan", &sampled)?;
            ctx.writer.csv(&format!("grid/scan_{tag}.csv"), &sampled.to_csv())?;
            entries.push(ManifestEntry {
                setting: setting.clone(),
                file,
            });
        }
        let manifest = Manifest {
            grid,
            k_max: Some(k_max),
            entries,
        };
        ctx.writer.json(GRID_MANIFEST, "grid_manifest", &manifest)?;
        println!("simulated {} displacement settings", manifest.entries.len());
    }
    Ok(())
}

fn fit_one(cfg: &PipelineConfig, scan: &TimeScanData, seed: u64) -> Result<FockDistribution, CliError> {
    let opts = cfg.fit_options(seed)?;
    let k_max = cfg.fit_spec()?.k_max;
    let dist = match cfg.fit_subset()? {
        Some(subset) => fit_fock_distribution_restricted(scan, &subset, &opts)?,
        None => fit_fock_distribution(scan, k_max, &opts)?,
    };
    Ok(dist)
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn fit(ctx: &mut Context, scans: &[PathBuf]) -> Result<(), CliError> {
    let cfg = ctx.config.clone();
    cfg.fit_spec()?;
    if !scans.is_empty() {
        for (i, path) in scans.iter().enumerate() {
            let scan: TimeScanData = read_document(path, "time_scan")?;
            let dist = fit_one(&cfg, &scan, derive_seed(ctx.seed, i as u64))?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scan").to_string();
            ctx.writer.json(&format!("{stem}.fock.json"), "fock_distribution", &dist)?;
            ctx.writer.csv(&format!("{stem}.fock.csv"), &fock_csv(&dist))?;
            report_fit(&stem, &dist);
        }
        return Ok(());
    }
    let dir = ctx.writer.dir.clone();
    let scan_path = dir.join(SCAN);
    let manifest_path = dir.join(GRID_MANIFEST);
    if !scan_path.exists() && !manifest_path.exists() {
        return Err(CliError::Config(format!(
            "nothing to fit: neither {} nor {} exists (run simulate first or pass --scan)",
            scan_path.display(),
            manifest_path.display()
        )));
    }
    if scan_path.exists() {
        let scan: TimeScanData = read_document(&scan_path, "time_scan")?;
        let dist = fit_one(&cfg, &scan, ctx.seed)?;
        ctx.writer.json("fock.json", "fock_distribution", &dist)?;
        ctx.writer.csv("fock.csv", &fock_csv(&dist))?;
        report_fit(&cfg.name, &dist);
    }
    if manifest_path.exists() {
        let manifest: Manifest = read_document(&manifest_path, "grid_manifest")?;
        let k_max = cfg.fit_spec()?.k_max;
        let mut entries = Vec::new();
        let mut table = String::from("setting,");
        table.push_str(&(0..manifest.grid.num_modes()).map(|j| format!("k{j},")).collect::<String>());
        table.push_str("q,sigma\n");
        for (i, e) in manifest.entries.iter().enumerate() {
            let scan: TimeScanData = read_document(&resolve(&dir, &e.file), "time_scan")?;
            let opts = cfg.fit_options(derive_seed(ctx.seed, i as u64))?;
            let mut dist = fit_fock_distribution(&scan, k_max, &opts)?;
            dist.source = format!("setting {:?}", e.setting);
            let tag = setting_tag(&e.setting);
            let file = format!("q/q_{tag}.json");
            ctx.writer.json(&file, "fock_distribution", &dist)?;
            for (k, v) in dist.indices.iter().zip(&dist.values) {
                table.push_str(&format!("{tag},"));
                table.push_str(&k.iter().map(|x| format!("{x},")).collect::<String>());
                table.push_str(&format!("{v},{}\n", dist.sigma(k)));
            }
            entries.push(ManifestEntry {
                setting: e.setting.clone(),
                file,
            });
        }
        ctx.writer.csv("q_table.csv", &table)?;
        let q = Manifest {
            grid: manifest.grid,
            k_max: Some(k_max),
            entries,
        };
        ctx.writer.json(Q_MANIFEST, "q_manifest", &q)?;
        println!("fitted {} displaced distributions (k_max = {k_max})", q.entries.len());
    }
    Ok(())
}

fn report_fit(label: &str, dist: &FockDistribution) {
    println!("{label}: fitted {} Fock populations, total {:.6}", dist.values.len(), dist.total());
    let mut order: Vec<usize> = (0..dist.values.len()).collect();
    order.sort_by(|&a, &b| dist.values[b].total_cmp(&dist.values[a]));
    for &i in order.iter().take(4) {
        let k = &dist.indices[i];
        println!("  P{:?} = {:.6} ± {:.6}", k, dist.values[i], dist.sigma(k));
    }
}

pub fn load_qdataset(path: &Path) -> Result<QDataset, CliError> {
    let manifest: Manifest = read_document(path, "q_manifest")?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for e in &manifest.entries {
        let dist: FockDistribution = read_document(&resolve(base, &e.file), "fock_distribution")?;
        entries.push((e.setting.clone(), dist));
    }
    let k_max = manifest
        .k_max
        .or_else(|| entries.iter().map(|(_, d)| d.k_max).max())
        .unwrap_or(manifest.grid.n_max);
    let mut q = QDataset::new(manifest.grid, k_max);
    for (s, d) in entries {
        q.insert(s, d);
    }
    Ok(q)
}

fn basis_label(config: &HilbertConfig, index: usize) -> String {
    config.decompose(index).1.iter().map(|k| k.to_string()).collect()
}

fn density_csv(r: &ReconstructedState) -> String {
    let cfg = r.rho_psd.config();
    let mut out = String::from("row,col,re,im,sigma_re,sigma_im,psd_re,psd_im\n");
    for i in 0..cfg.dim() {
        for j in 0..cfg.dim() {
            let v = r.rho_raw[(i, j)];
            let p = r.rho_psd.entries()[(i, j)];
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                basis_label(cfg, i),
                basis_label(cfg, j),
                v.re,
                v.im,
                r.var_re[(i, j)].sqrt(),
                r.var_im[(i, j)].sqrt(),
                p.re,
                p.im
            ));
        }
    }
    out
}

pub fn reconstruct_cmd(ctx: &mut Context, manifest: Option<PathBuf>) -> Result<(), CliError> {
    let path = manifest.unwrap_or_else(|| ctx.writer.dir.join(Q_MANIFEST));
    let q = load_qdataset(&path)?;
    let target = ctx.config.target()?;
    let r = reconstruct(&q, target.as_ref())?;
    ctx.writer.json("reconstruction.json", "reconstructed_state", &r)?;
    ctx.writer.csv("density.csv", &density_csv(&r))?;
    let cfg = r.rho_psd.config().clone();
    println!(
        "reconstructed {}x{} density matrix (n_max = {}, k_max = {})",
        cfg.dim(),
        cfg.dim(),
        r.n_max,
        q.k_max
    );
    if let Some(f) = r.fidelity {
        println!("fidelity (PSD) = {f:.4}, fidelity (raw) = {:.4}", r.fidelity_raw.unwrap_or(f64::NAN));
    }
    println!(
        "raw trace = {:.4}, min eigenvalue = {:.4}, trace distance raw-PSD = {:.4}",
        r.diagnostics.raw_trace, r.diagnostics.min_eigenvalue, r.diagnostics.trace_distance_raw_to_psd
    );
    let last = cfg.dim() - 1;
    let v = r.rho_raw[(0, last)];
    println!(
        "rho[{},{}] = {:.4}{:+.4}i ± ({:.4}, {:.4})",
        basis_label(&cfg, 0),
        basis_label(&cfg, last),
        v.re,
        v.im,
        r.var_re[(0, last)].sqrt(),
        r.var_im[(0, last)].sqrt()
    );
    for w in &r.diagnostics.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

#[derive(Serialize)]
struct VerificationSummary {
    pair: (usize, usize),
    amplitude: f64,
    amplitude_sigma: f64,
    direct_coherence: f64,
    offset: f64,
}

pub fn verify(ctx: &mut Context) -> Result<(), CliError> {
    let cfg = ctx.config.clone();
    let spec = cfg
        .verification
        .clone()
        .ok_or_else(|| CliError::Config("config has no verification section".into()))?;
    let mut rho: DensityMatrix = cfg.prepared_density()?;
    if spec.dephase {
        rho = rho.dephased();
    }
    let d = rho.config().num_modes();
    let pairs = spec
        .pairs
        .clone()
        .unwrap_or_else(|| (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect());
    let phases = phase_grid(spec.phase_points);
    let mut summary = Vec::new();
    for (n, &(i, j)) in pairs.iter().enumerate() {
        let r = parity_phase_scan(
            &rho,
            (i, j),
            &phases,
            &phases,
            &cfg.preparation.calibration,
            0,
            spec.shots,
            derive_seed(ctx.seed, n as u64),
        )?;
        ctx.writer.json(&format!("phase_scan_{i}_{j}.json"), "phase_scan", &r)?;
        ctx.writer.csv(&format!("phase_scan_{i}_{j}.csv"), &r.to_csv())?;
        println!(
            "pair ({i},{j}): amplitude {:.4} ± {:.4} (direct |rho_ij| = {:.4})",
            r.amplitude, r.amplitude_sigma, r.direct_coherence
        );
        summary.push(VerificationSummary {
            pair: (i, j),
            amplitude: r.amplitude,
            amplitude_sigma: r.amplitude_sigma,
            direct_coherence: r.direct_coherence,
            offset: r.offset,
        });
    }
    ctx.writer.report("verification.json", "verification_summary", &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct ThermalReport {
    nbar_true: f64,
    nbar: f64,
    sigma: f64,
    coherent_alpha: f64,
    shots: Option<u64>,
}

pub fn calibrate(ctx: &mut Context) -> Result<(), CliError> {
    let cfg = ctx.config.clone();
    let spec = cfg
        .calibration
        .clone()
        .ok_or_else(|| CliError::Config("config has no calibration section".into()))?;
    let omega = cfg.preparation.calibration.sideband(0, 0)?;
    let grid = phase_grid(spec.phase_points);
    let r = calibrate_spin_phase(spec.injected_offset, &grid, spec.push, omega, spec.shots, ctx.seed)?;
    ctx.writer.json("calibration.json", "spin_phase_calibration", &r)?;
    ctx.writer.csv("calibration.csv", &r.to_csv())?;
    println!(
        "spin returns to down at phi_b = {:.2} deg; phi_s = {:.2} deg (injected offset {:.2} deg)",
        r.phi_b_min.to_degrees(),
        r.spin_phase.to_degrees(),
        spec.injected_offset.to_degrees()
    );
    if let Some(t) = &spec.thermal {
        let mcfg = HilbertConfig::new(1, t.cutoff, 0)?;
        let rho = DensityMatrix::thermal(&mcfg, &[t.nbar])?;
        let readout = RabiCalibration::readout(&[omega]);
        let exact = exact_scan(&rho, &readout, &uniform_times(t.span, t.points))?;
        let scan = match spec.shots {
            Some(n) => sample_populations(&exact, n, derive_seed(ctx.seed, 1))?,
            None => exact,
        };
        let fit = fit_thermal_nbar(&scan)?;
        let coherent = fit_coherent_alpha(&scan).map(|f| f.value).unwrap_or(f64::NAN);
        ctx.writer.json("thermal_scan.json", "time_scan", &scan)?;
        ctx.writer.csv("thermal_scan.csv", &scan.to_csv())?;
        ctx.writer.report(
            "thermal.json",
            "thermal_fit",
            &ThermalReport {
                nbar_true: t.nbar,
                nbar: fit.value,
                sigma: fit.sigma,
                coherent_alpha: coherent,
                shots: spec.shots,
            },
        )?;
        println!("thermal fit: nbar = {:.4} ± {:.4} (true {:.4})", fit.value, fit.sigma, t.nbar);
    }
    Ok(())
}
