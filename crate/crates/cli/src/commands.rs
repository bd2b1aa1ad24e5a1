//! Subcommand bodies. Each reads the validated config, calls into the core
//! library, prints a short summary and hands its files to [`Outputs`].

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use holetrap::beamline::{
    divergence_angle, invert_divergence_to_source, most_probable_beam_speed, oven_flux, sample_atom,
    write_samples_csv, Aperture, BeamModel, OvenGeometry,
};
use holetrap::config::RunConfig;
use holetrap::constants::{registry, value};
use holetrap::cooldyn::{
    capture_ensemble, hop_ensemble, run_load, run_protocol, run_sympathetic, write_events_jsonl,
    write_trajectory_csv, CoolingScenario, EventThresholds, InjectionSource, Profile, Protocol, ProtocolStage,
    StageKind, SurfaceTrap, TrapField,
};
use holetrap::crystal::{equilibrium_positions, max_coolable_chain, normal_modes, ChainTrap, ModeReport, ModeSet};
use holetrap::isotopes::{Isotope, IsotopeTable};
use holetrap::spectra::{
    detuning_grid, fit_voigt_peaks, synth_spectrum, FitConstraints, LineshapeModel, Noise, Param, Spectrum, VoigtFit,
};
use holetrap::trapmodel::{
    hole_distortion_scan, secular_analysis, write_distortion_csv, ElectrodeLayout, LayoutFile, Trap, TrapDrive,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::error::CliError;
use crate::output::{Manifest, Outputs};

pub struct Context {
    pub cfg: RunConfig,
    pub out: Outputs,
}

impl Context {
    pub fn new(cfg: RunConfig, out_dir: &Path) -> Result<Self, CliError> {
        Ok(Self {
            out: Outputs::create(out_dir)?,
            cfg,
        })
    }

    /// Writes the effective config and then the manifest.
    pub fn finish(mut self, command: &str) -> Result<(), CliError> {
        let text = self.cfg.to_toml_string();
        self.out.write("effective_config.toml", text.as_bytes())?;
        let profile = self.cfg.str("profile").unwrap_or("desk").to_string();
        let manifest = Manifest::new(command, &text, self.cfg.seed(), &profile, &self.cfg.defaulted, &self.out);
        manifest.write(self.out.dir())?;
        println!("wrote {} output(s) and manifest to {}", self.out.records().len(), self.out.dir().display());
        Ok(())
    }

    fn profile(&self) -> Profile {
        match self.cfg.str("profile") {
            Some("overnight") => Profile::Overnight,
            _ => Profile::Desk,
        }
    }
}

fn isotope(cfg: &RunConfig, key: &str) -> Result<Isotope, CliError> {
    let name = cfg.str(key).unwrap_or("40Ca");
    Ok(IsotopeTable::calcium().get(name)?.clone())
}

fn layout_and_drive(cfg: &RunConfig) -> Result<(ElectrodeLayout, TrapDrive), CliError> {
    let drive = cfg.str("trap.drive").unwrap_or("symmetric");
    match cfg.str("trap.layout").unwrap_or("canonical") {
        "canonical" => Ok((ElectrodeLayout::canonical(), ElectrodeLayout::canonical_drive(drive)?)),
        path => {
            let file = LayoutFile::load(&cfg.resolve(path))?;
            Ok((file.layout()?, file.drive(drive)?))
        }
    }
}

fn mhz(hz: f64) -> f64 {
    hz * 1e-6
}

pub fn trap_solve(ctx: &mut Context) -> Result<(), CliError> {
    let (layout, drive) = layout_and_drive(&ctx.cfg)?;
    let species = isotope(&ctx.cfg, "trap.species")?;
    let r = secular_analysis(&layout, &drive, &species)?;
    let freqs_hz: Vec<f64> = r.frequencies.iter().map(|w| w / (2.0 * PI)).collect();
    println!(
        "trap center ({:.2}, {:.2}, {:.2}) um",
        r.trap_center.x * 1e6,
        r.trap_center.y * 1e6,
        r.trap_center.z * 1e6
    );
    for (i, (f, a)) in freqs_hz.iter().zip(&r.principal_axes).enumerate() {
        println!("  mode {i}: {:.4} MHz along ({:+.4}, {:+.4}, {:+.4})", mhz(*f), a.x, a.y, a.z);
    }
    println!("  x-z rotation {:.3} deg", r.xz_rotation_angle);
    let report = json!({
        "layout": layout.name,
        "drive": ctx.cfg.str("trap.drive"),
        "species": species.name,
        "height_m": r.trap_center.z,
        "frequencies_hz": freqs_hz,
        "secular": r,
    });
    ctx.out.write_json("trap_solve.json", &report)
}

pub fn distortion_scan(ctx: &mut Context) -> Result<(), CliError> {
    let (layout, drive) = layout_and_drive(&ctx.cfg)?;
    let sides = ctx.cfg.si_list("trap.hole_sides");
    let height = ctx.cfg.si("trap.scan_height");
    let rows = hole_distortion_scan(&layout, &drive, &sides, height)?;
    let bound = value("distortion_bound_v");
    println!("hole side [um]  distortion [V]   (bound {bound:e} V)");
    for r in &rows {
        let flag = if r.distortion < bound { "" } else { "  above bound" };
        println!("  {:>10.1}   {:.3e}{flag}", r.hole_side * 1e6, r.distortion);
    }
    ctx.out.write_with("distortion.csv", |w| write_distortion_csv(&rows, w))
}

pub fn beam_divergence(ctx: &mut Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let species = isotope(cfg, "beam.species")?;
    let oven = OvenGeometry {
        distance_to_hole: cfg.si("beam.oven_distance"),
        source_diameter: cfg.si("beam.source_diameter"),
        temperature: cfg.si("beam.temperature"),
        ..OvenGeometry::default()
    };
    oven.validate()?;
    let aperture = Aperture {
        side: cfg.si("beam.hole_side"),
        ..Aperture::default()
    };
    let half = 0.5 * aperture.side;
    let d = oven.distance_to_hole;
    let point = divergence_angle(0.0, half, d)?;
    let finite = divergence_angle(0.5 * oven.source_diameter, half, d)?;
    let target = cfg.opt_si("beam.divergence").unwrap_or_else(|| value("fitted_divergence_deg"));
    let inverted = invert_divergence_to_source(target, half, d)?;
    let speed = most_probable_beam_speed(oven.temperature, species.mass)?;
    let flux = oven_flux(&oven, &aperture, &species)?;
    println!("point-source divergence   {point:.4} deg");
    println!("finite-source divergence  {finite:.4} deg");
    println!("source for {target:.3} deg    {:.2} um", inverted * 1e6);
    println!("most probable speed       {speed:.1} m/s");
    println!("flux through hole         {flux:.4e} atoms/s");
    ctx.out.write_json(
        "divergence.json",
        &json!({
            "species": species.name,
            "point_source_divergence_deg": point,
            "finite_source_divergence_deg": finite,
            "target_divergence_deg": target,
            "inverted_source_diameter_m": inverted,
            "most_probable_speed_m_s": speed,
            "flux_atoms_per_s": flux,
        }),
    )?;
    let n = ctx.cfg.int("beam.samples") as usize;
    if n > 0 {
        let beam = BeamModel::from_geometry(&oven, &aperture, &species)?;
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed());
        let samples: Vec<_> = (0..n).map(|_| sample_atom(&beam, &oven, &aperture, &mut rng)).collect();
        ctx.out.write_with("beam_samples.csv", |w| write_samples_csv(&samples, w))?;
    }
    Ok(())
}

fn spectra_table(cfg: &RunConfig) -> Result<IsotopeTable, CliError> {
    let names = cfg.strs("spectra.isotopes");
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    Ok(IsotopeTable::calcium().only(&refs)?)
}

pub fn spectrum_synth(ctx: &mut Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let table = spectra_table(cfg)?;
    let model = LineshapeModel::from_widths(cfg.si("spectra.gaussian_fwhm"), cfg.si("spectra.lorentzian_fwhm"));
    let grid = detuning_grid(
        cfg.si("spectra.scan_start"),
        cfg.si("spectra.scan_stop"),
        cfg.int("spectra.points") as usize,
    )?;
    let level = cfg.float("spectra.noise_level").unwrap_or(0.0);
    let noise = (level > 0.0).then(|| Noise {
        level,
        seed: cfg.seed(),
    });
    let s = synth_spectrum(&table, &model, &grid, noise)?;
    println!(
        "{} points, L = {:.2} MHz, G = {:.2} MHz, noise {level}",
        s.len(),
        mhz(model.lorentzian_fwhm),
        mhz(model.gaussian_fwhm)
    );
    ctx.out.write_with("spectrum.csv", |w| s.write_csv(w))
}

fn parse_pin(text: &str) -> Result<(usize, Param), CliError> {
    let bad = || CliError::Usage(format!("--pin expects PEAK:PARAM, got `{text}`"));
    let (peak, param) = text.split_once(':').ok_or_else(bad)?;
    let peak = peak.trim().parse().map_err(|_| bad())?;
    let param = match param.trim() {
        "center" => Param::Center,
        "lorentzian" => Param::Lorentzian,
        "gaussian" => Param::Gaussian,
        "amplitude" => Param::Amplitude,
        "baseline" => Param::Baseline,
        _ => return Err(bad()),
    };
    Ok((peak, param))
}

#[derive(Serialize)]
struct PeakReport {
    isotope: String,
    fit: VoigtFit,
}

pub fn spectrum_fit(ctx: &mut Context, input: Option<&Path>, pins: &[String]) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let path = match (input, cfg.str("spectra.data")) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => cfg.resolve(p),
        (None, None) => return Err(CliError::Usage("no spectrum given: pass --input or set spectra.data".into())),
    };
    let file = std::fs::File::open(&path).map_err(CliError::io(format!("reading {}", path.display())))?;
    let spectrum = Spectrum::read_csv(std::io::BufReader::new(file))?;
    let table = spectra_table(cfg)?;
    let first = VoigtFit::guess(&spectrum)?;
    let reference = table.iter().next().map(|i| (i.shift_423, i.natural_abundance)).unwrap_or((0.0, 1.0));
    let initial: Vec<VoigtFit> = table
        .iter()
        .map(|iso| {
            let mut f = first;
            f.center.value += iso.shift_423 - reference.0;
            f.amplitude.value *= iso.natural_abundance / reference.1;
            f
        })
        .collect();
    let mut constraints = if cfg.boolean("spectra.physical_bounds") {
        FitConstraints::physical()
    } else {
        FitConstraints::default()
    };
    for p in pins {
        let (peak, param) = parse_pin(p)?;
        if peak >= initial.len() {
            return Err(CliError::Usage(format!("--pin {p}: there are only {} peak(s)", initial.len())));
        }
        constraints = constraints.pin(peak, param);
    }
    let fits = fit_voigt_peaks(&spectrum, &initial, &constraints)?;
    for (iso, f) in table.iter().zip(&fits) {
        println!(
            "{:>5}: center {:9.3} MHz  L {:7.3} +- {:.3} MHz  G {:7.3} +- {:.3} MHz",
            iso.name,
            mhz(f.center.value),
            mhz(f.lorentzian_fwhm.value),
            mhz(f.lorentzian_fwhm.sigma),
            mhz(f.gaussian_fwhm.value),
            mhz(f.gaussian_fwhm.sigma)
        );
    }
    let used: Vec<_> = ["natural_linewidth_423_hz", "shift_423_ca44_hz", "abundance_ca40", "abundance_ca44"]
        .iter()
        .map(|n| registry().get(n).clone())
        .collect();
    let report = json!({
        "input": path.display().to_string(),
        "points": spectrum.len(),
        "residual_norm": fits.first().map(|f| f.residual_norm),
        "iterations": fits.first().map(|f| f.iterations),
        "constraints": constraints,
        "peaks": table.iter().zip(&fits).map(|(i, f)| PeakReport { isotope: i.name.clone(), fit: *f }).collect::<Vec<_>>(),
        "constants": used,
    });
    ctx.out.write_json("fit.json", &report)?;
    let model: Vec<f64> = spectrum
        .detuning
        .iter()
        .map(|&x| fits.iter().map(|f| f.eval(x)).sum::<Result<f64, _>>())
        .collect::<Result<_, _>>()?;
    // Each peak carries the shared baseline; count it once.
    let extra = fits.first().map_or(0.0, |f| f.baseline.value) * (fits.len().saturating_sub(1)) as f64;
    ctx.out.write_with("fit_curve.csv", |w| {
        writeln!(w, "detuning_hz,intensity,model")?;
        for ((x, y), m) in spectrum.detuning.iter().zip(&spectrum.intensity).zip(&model) {
            writeln!(w, "{x:e},{y:e},{:e}", m - extra)?;
        }
        Ok(())
    })
}

fn crystal_trap(cfg: &RunConfig) -> Result<ChainTrap, CliError> {
    let w = |k: &str| 2.0 * PI * cfg.si(k);
    Ok(ChainTrap::new(
        IsotopeTable::calcium().get("40Ca")?.mass,
        w("crystal.axial_frequency"),
        w("crystal.radial_x_frequency"),
        w("crystal.radial_y_frequency"),
    )?)
}

pub fn modes(ctx: &mut Context) -> Result<(), CliError> {
    let table = IsotopeTable::calcium();
    let species = ctx
        .cfg
        .strs("crystal.chain")
        .iter()
        .map(|n| table.get(n).cloned())
        .collect::<Result<Vec<_>, _>>()?;
    if species.is_empty() {
        return Err(CliError::Usage("crystal.chain is empty".into()));
    }
    let chain = equilibrium_positions(&species, &crystal_trap(&ctx.cfg)?)?;
    let spectrum = normal_modes(&chain)?;
    let report = ModeReport::new(&chain, &spectrum);
    let names = report.species.join(" ");
    println!("chain: {names}");
    println!("{:<9} {:>4} {:>12}  participation", "direction", "mode", "freq [MHz]");
    for b in &report.blocks {
        for (m, f) in b.frequencies_hz.iter().enumerate() {
            let p: Vec<String> = b.participation.iter().map(|row| format!("{:+.3}", row[m])).collect();
            println!("{:<9} {:>4} {:>12.5}  {}", b.direction, m, mhz(*f), p.join(" "));
        }
    }
    ctx.out.write_json("modes.json", &report)?;
    ctx.out.write_with("modes.csv", |w| {
        writeln!(w, "direction,mode,frequency_hz")?;
        for b in &report.blocks {
            for (m, f) in b.frequencies_hz.iter().enumerate() {
                writeln!(w, "{},{m},{f:e}", b.direction)?;
            }
        }
        Ok(())
    })
}

pub fn coverage(ctx: &mut Context, modes: Option<&str>) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let set = match modes.or(cfg.str("crystal.modes")) {
        Some("all") => ModeSet::All,
        _ => ModeSet::Axial,
    };
    let coolant = isotope(cfg, "crystal.coolant")?;
    let sc = isotope(cfg, "crystal.sympathetic")?;
    let count = cfg.int("crystal.coolant_count") as usize;
    let scan = max_coolable_chain(
        &coolant,
        count,
        &sc,
        &crystal_trap(cfg)?,
        cfg.si("crystal.damping"),
        cfg.si("crystal.heating_rate"),
        set,
        cfg.int("crystal.scan_limit") as usize,
    )?;
    println!("{count} x {} coolants, {} sympathetic, {set:?} modes", coolant.name, sc.name);
    for e in &scan.entries {
        println!(
            "  N = {:>2}: min coverage {:10.3} /s  {}  coolants at {:?}",
            e.sc_ions,
            e.min_coverage,
            if e.coolable { "coolable" } else { "not coolable" },
            e.placement
        );
    }
    println!("N_max = {} ({:?})", scan.n_max, scan.verdict);
    ctx.out.write_json(
        "coverage.json",
        &json!({
            "coolant": coolant.name,
            "coolant_count": count,
            "sympathetic": sc.name,
            "modes": set,
            "calibration": "calibrated, not ab initio",
            "scan": scan,
        }),
    )
}

/// The cooldyn block as a scenario. Explicit values are used as given; the
/// profile scales only the defaults.
fn scenario(ctx: &Context) -> Result<CoolingScenario, CliError> {
    let cfg = &ctx.cfg;
    let coolant = isotope(cfg, "cooldyn.coolant")?;
    let sympathetic = isotope(cfg, "cooldyn.sympathetic")?;
    let trap = match cfg.str("cooldyn.trap").unwrap_or("harmonic") {
        "harmonic" => TrapField::Harmonic(crystal_trap(cfg)?),
        kind => {
            let (layout, drive) = layout_and_drive(cfg)?;
            let surface = SurfaceTrap::new(Trap::new(&layout, &drive)?, &coolant)?;
            if kind == "full_rf" {
                TrapField::FullRf(surface)
            } else {
                TrapField::Secular(surface)
            }
        }
    };
    let count = cfg.int("cooldyn.coolant_count") as usize;
    let mut sc = CoolingScenario::with_trap(trap, coolant, count, sympathetic, ctx.profile())?;
    sc.seed = cfg.seed();
    if let Some(d) = cfg.opt_si("cooldyn.duration") {
        sc.duration = d;
    }
    if let Some(dt) = cfg.opt_si("cooldyn.timestep") {
        sc.timestep = dt;
    }
    if let Some(h) = cfg.opt_si("cooldyn.heating_rate") {
        sc.noise.heating_rate = h;
    }
    sc.noise.photon_recoil = cfg.boolean("cooldyn.photon_recoil");
    for b in &mut sc.beams {
        if let Some(s) = cfg.float("cooldyn.saturation") {
            b.saturation = s;
        }
        if let Some(d) = cfg.opt_si("cooldyn.detuning") {
            b.detuning = d;
        }
    }
    if let Some(r) = cfg.opt_si("cooldyn.escape_radius") {
        sc.escape_radius = r;
    }
    if let (Some(ratio), InjectionSource::Beam { energy_ratio, .. }) =
        (cfg.float("cooldyn.energy_ratio"), &mut sc.injection.source)
    {
        *energy_ratio = ratio;
    }
    let f_axial = sc.trap.axial_frequency(&sc.coolant)?;
    let defaults = EventThresholds::for_axial_frequency(f_axial);
    sc.thresholds = EventThresholds {
        persist: cfg.opt_si("cooldyn.persist").unwrap_or(defaults.persist),
        window: cfg.opt_si("cooldyn.window").unwrap_or(defaults.window),
        melt_temperature: cfg.opt_si("cooldyn.melt_temperature").unwrap_or(defaults.melt_temperature),
    };
    sc.decimation = cfg.int("cooldyn.decimation") as usize;
    sc.validate()?;
    Ok(sc)
}

fn write_run_files(
    out: &mut Outputs,
    events: &[holetrap::cooldyn::Event],
    frames: Option<&[holetrap::cooldyn::Frame]>,
) -> Result<(), CliError> {
    out.write_with("events.jsonl", |w| write_events_jsonl(events, w))?;
    if let Some(frames) = frames {
        out.write_with("trajectory.csv", |w| write_trajectory_csv(frames, w))?;
    }
    Ok(())
}

pub fn simulate_load(ctx: &mut Context) -> Result<(), CliError> {
    let sc = scenario(ctx)?;
    let record = ctx.cfg.boolean("cooldyn.record");
    let r = run_load(&sc, 0, record)?;
    println!(
        "{} of {} coolants kept, crystallized: {}, final temperature {:.3e} K",
        r.survivors, r.coolants_loaded, r.crystallized, r.final_temperature
    );
    if let Some(t) = r.crystallization_time {
        println!("crystallized after {:.3} ms", t * 1e3);
    }
    ctx.out.write_json("load.json", &r)?;
    write_run_files(&mut ctx.out, &r.events, r.recording.as_ref().map(|x| x.frames.as_slice()))
}

pub fn simulate_sympathetic(ctx: &mut Context) -> Result<(), CliError> {
    let sc = scenario(ctx)?;
    let record = ctx.cfg.boolean("cooldyn.record");
    let r = run_sympathetic(&sc, 0, record)?;
    println!(
        "injected {} at {:.3} x trap depth: captured {}{}",
        sc.injection.species.name,
        r.injection_energy / r.trap_depth,
        r.captured,
        r.failure.as_deref().map(|f| format!(" ({f})")).unwrap_or_default()
    );
    if let Some(t) = r.cooling_time {
        println!("cooling time {:.3} ms", t * 1e3);
    }
    ctx.out.write_json("sympathetic.json", &r)?;
    write_run_files(&mut ctx.out, &r.events, r.recording.as_ref().map(|x| x.frames.as_slice()))?;

    let trials = ctx.cfg.int("cooldyn.trials") as usize;
    if trials > 0 {
        let ratios = ctx.cfg.floats("cooldyn.energy_ratios");
        let pts = capture_ensemble(&sc, &ratios, trials)?;
        println!("energy ratio  capture probability  ({trials} trials)");
        for p in &pts {
            println!("  {:>10.3}  {:.3}", p.energy_ratio, p.probability());
        }
        ctx.out.write_with("capture.csv", |w| {
            writeln!(w, "energy_ratio,trials,captured,probability,coolant_losses,hot_losses,mean_cooling_time_s")?;
            for p in &pts {
                let t = p.mean_cooling_time.map(|t| format!("{t:e}")).unwrap_or_default();
                writeln!(
                    w,
                    "{},{},{},{},{},{},{t}",
                    p.energy_ratio,
                    p.trials,
                    p.captured,
                    p.probability(),
                    p.coolant_losses,
                    p.hot_losses
                )?;
            }
            Ok(())
        })?;
        let mut species = vec![sc.coolant.clone(); sc.coolant_count];
        species.push(sc.injection.species.clone());
        let rates = ctx.cfg.si_list("cooldyn.heating_rates");
        let hops = hop_ensemble(&sc, &species, &rates, trials)?;
        println!("heating [K/s]  hop rate [1/s]");
        for h in &hops {
            println!("  {:>10.1}  {:.3}", h.heating_rate, h.rate);
        }
        ctx.out.write_with("hops.csv", |w| {
            writeln!(w, "heating_rate_K_per_s,trials,hops,melts,losses,rate_per_s")?;
            for h in &hops {
                writeln!(w, "{},{},{},{},{},{}", h.heating_rate, h.trials, h.hops, h.melts, h.losses, h.rate)?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

pub fn simulate_protocol(ctx: &mut Context) -> Result<(), CliError> {
    let sc = scenario(ctx)?;
    let protocol = match ctx.cfg.stages() {
        Some(stages) => Protocol {
            stages: stages
                .iter()
                .map(|s| ProtocolStage {
                    name: s.name.clone(),
                    kind: match s.kind.as_str() {
                        "load" => StageKind::Load,
                        "inject" => StageKind::Inject,
                        _ => StageKind::Identify,
                    },
                    duration: RunConfig::stage_duration(s),
                })
                .collect(),
        },
        None => Protocol::standard(&sc)?,
    };
    let r = run_protocol(&sc, &protocol, 0)?;
    for s in &r.stages {
        println!("stage {} `{}` ({:?}, {:.3} ms): {}", s.index, s.name, s.kind, s.duration * 1e3, s.verdict);
    }
    println!("captured {}, identified {}", r.captured, r.identified);
    ctx.out.write_json("protocol.json", &r)?;
    write_run_files(&mut ctx.out, &r.events, None)
}
