use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use serde_json::json;

use qlr_core::data::{generate, SyntheticData};
use qlr_core::memsim::report::{
    comparison_csv, published_row, report_memory_with_payload, MemoryBreakdown, TargetFigures,
};
use qlr_core::memsim::{
    bandwidth_sweep, compare_targets, plan_tiles, report_lifetime, simulate_steps, sweep_csv,
    sweet_spot, CostReport, HierarchyConfig, Step,
};
use qlr_core::model::NetworkModel;
use qlr_core::protocol::{
    build_initial_buffer, init_model, run_with_buffer, split_stream, ProtocolSplit,
};
use qlr_core::ptq::{calibrate, freeze_and_quantize};
use qlr_core::quant::{CalibrationStats, LatentPrecision};
use qlr_core::replay::ReplayBuffer;

use crate::config::Loaded;
use crate::error::CliError;
use crate::manifest::Outputs;

pub const MODEL_FP32: &str = "model_fp32";
pub const CALIBRATION: &str = "calibration.json";
pub const MODEL_FROZEN: &str = "model_frozen";
pub const REPLAYS: &str = "replays.qlr";
pub const SIMULATE_JSON: &str = "simulate.json";

/// Fraction of the best MAC/cyc that defines a sweet spot.
pub const SWEET_SPOT_FRACTION: f64 = 0.9;

pub struct Ctx<'a> {
    pub loaded: &'a Loaded,
    pub workers: usize,
    pub wallclock: bool,
}

fn to_json(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes") + "\n"
}

fn stream(loaded: &Loaded) -> Result<(SyntheticData, ProtocolSplit), CliError> {
    let data = generate(&loaded.config.dataset)?;
    let split = split_stream(&data.train, &loaded.config.protocol)?;
    Ok((data, split))
}

fn load_model(path: &Path, workers: usize) -> Result<NetworkModel, CliError> {
    let mut m = NetworkModel::load(path).map_err(|e| match CliError::from(e) {
        CliError::Runtime(m) => CliError::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })?;
    m.set_workers(workers);
    Ok(m)
}

fn load_stats(path: &Path) -> Result<CalibrationStats, CliError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Corrupt(format!("{}: {e}", path.display())))
}

/// Builds the FP32 model from the seed and records activation and weight ranges
/// over the initial set.
pub fn calibrate_cmd(ctx: &Ctx, out: &mut Outputs) -> Result<(), CliError> {
    let loaded = ctx.loaded;
    let (_, split) = stream(loaded)?;
    let (layers, l) = loaded.model_layers()?;
    let mut model = init_model(
        &layers,
        l,
        loaded.config.dataset.sample_shape(),
        loaded.config.seed,
    )?;
    model.set_workers(ctx.workers);
    let stats = calibrate(&mut model, std::slice::from_ref(&split.initial_inputs))?;
    model.save(&out.path(MODEL_FP32))?;
    out.record(MODEL_FP32);
    let text =
        serde_json::to_string_pretty(&stats).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
    out.write(CALIBRATION, text)?;
    info!(
        "calibrated {} frozen layers on {} samples",
        l, stats.samples
    );
    Ok(())
}

/// Quantizes the frozen stage at `q_bits` with latents at `q_lr`.
pub fn freeze_cmd(ctx: &Ctx, out: &mut Outputs) -> Result<(), CliError> {
    let fp = out.require(MODEL_FP32, "calibrate")?;
    let cal = out.require(CALIBRATION, "calibrate")?;
    let mut model = load_model(&fp, ctx.workers)?;
    let stats = load_stats(&cal)?;
    freeze_and_quantize(
        &mut model,
        &stats,
        ctx.loaded.config.q_bits,
        ctx.loaded.latent(),
    )?;
    model.save(&out.path(MODEL_FROZEN))?;
    out.record(MODEL_FROZEN);
    Ok(())
}

fn replay_summary(buffer: &ReplayBuffer) -> serde_json::Value {
    let counts: serde_json::Map<String, serde_json::Value> = buffer
        .class_counts()
        .into_iter()
        .map(|(c, n)| (c.to_string(), json!(n)))
        .collect();
    json!({
        "entries": buffer.len(),
        "bits": buffer.precision().bits(),
        "layer": buffer.layer(),
        "vector_shape": buffer.vector_shape(),
        "payload_bytes": buffer.payload_bytes(),
        "total_bytes": buffer.total_bytes(),
        "class_counts": counts,
    })
}

/// Encodes `n_lr` class-stratified initial samples through the frozen stage.
pub fn build_replays_cmd(ctx: &Ctx, out: &mut Outputs) -> Result<(), CliError> {
    let frozen = out.require(MODEL_FROZEN, "freeze")?;
    let mut model = load_model(&frozen, ctx.workers)?;
    let (_, split) = stream(ctx.loaded)?;
    let buffer = build_initial_buffer(
        &mut model,
        &split,
        &ctx.loaded.config.protocol,
        ctx.loaded.config.n_lr,
    )?;
    buffer.save(&out.path(REPLAYS))?;
    out.record(REPLAYS);
    out.write("replays.json", to_json(&replay_summary(&buffer)))?;
    Ok(())
}

/// Initial phase plus the event stream, replaying from `replays.qlr`.
pub fn run_protocol_cmd(ctx: &Ctx, out: &mut Outputs) -> Result<(), CliError> {
    let frozen = out.require(MODEL_FROZEN, "freeze")?;
    let replays = out.require(REPLAYS, "build-replays")?;
    let mut model = load_model(&frozen, ctx.workers)?;
    let buffer = ReplayBuffer::load(&replays)?;
    let (data, split) = stream(ctx.loaded)?;
    let cfg = &ctx.loaded.config;
    let outcome = run_with_buffer(&mut model, &split, &data.test, &cfg.protocol, buffer)?;
    out.write("trace.csv", outcome.to_csv(ctx.wallclock))?;
    let summary = json!({
        "q_bits": cfg.q_bits,
        "q_lr": cfg.q_lr,
        "n_lr": cfg.n_lr,
        "events": outcome.trace.len() - 1,
        "final_accuracy": outcome.final_accuracy,
        "old_class_accuracy": outcome.old_class_accuracy,
        "seen_classes": outcome.seen_classes.len(),
        "buffer_payload_bytes": outcome.buffer_payload_bytes,
    });
    out.write("protocol.json", to_json(&summary))?;
    info!("final accuracy {:.3}", outcome.final_accuracy);
    Ok(())
}

fn adaptive_steps(loaded: &Loaded) -> Result<(Vec<qlr_core::memsim::LayerStep>, usize), CliError> {
    let (workload, first) = loaded.workload()?;
    Ok((
        workload.adaptive_steps(first, loaded.config.protocol.batch_size, 4)?,
        first,
    ))
}

/// Tile plans of every training step of the adaptive stage.
pub fn plan_cmd(ctx: &Ctx, out: &mut Outputs) -> Result<(), CliError> {
    let cfg = &ctx.loaded.config.hierarchy;
    let (steps, _) = adaptive_steps(ctx.loaded)?;
    let mut plans = String::from("step,groups,m,k,n,tile_groups,tile_m,tile_n,tile_k,tiles,max_working_set,limit,macs,bytes_moved\n");
    let mut tiles = String::from(
        "step,tile,groups_start,groups_end,m_start,m_end,n_start,n_end,k_start,k_end,buffer,in_bytes,out_bytes,working_set\n",
    );
    for s in &steps {
        let p = plan_tiles(s, cfg)?;
        let label = s.label();
        let sh = p.shape;
        writeln!(
            plans,
            "{label},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.groups,
            s.m,
            s.k,
            s.n,
            sh.groups,
            sh.m,
            sh.n,
            sh.k,
            p.tiles.len(),
            p.max_working_set(),
            p.limit,
            p.macs(),
            p.bytes_moved()
        )
        .expect("write to string");
        for (i, t) in p.tiles.iter().enumerate() {
            writeln!(
                tiles,
                "{label},{i},{},{},{},{},{},{},{},{},{:?},{},{},{}",
                t.groups.start,
                t.groups.end,
                t.m.start,
                t.m.end,
                t.n.start,
                t.n.end,
                t.k.start,
                t.k.end,
                t.buffer,
                t.in_bytes(),
                t.out_bytes(),
                t.working_set
            )
            .expect("write to string");
        }
    }
    out.write("plan.csv", plans)?;
    out.write("tiles.csv", tiles)?;
    Ok(())
}

fn cost_json(r: &CostReport) -> serde_json::Value {
    json!({
        "macs": r.mac_count,
        "compute_cycles": r.compute_cycles,
        "cycles": r.cycles,
        "latency_s": r.latency_s,
        "energy_j": r.energy_j,
        "mac_per_cycle": r.mac_per_cycle,
        "tiling_overhead": r.tiling_overhead(),
    })
}

/// Per-event latency and energy of the configured workload.
pub struct EventCost {
    pub iterations: usize,
    pub iteration: CostReport,
    pub frozen: CostReport,
}

impl EventCost {
    pub fn adaptive(&self) -> (f64, f64) {
        self.iteration.repeated(self.iterations)
    }

    pub fn total(&self) -> (f64, f64) {
        let (l, e) = self.adaptive();
        (l + self.frozen.latency_s, e + self.frozen.energy_j)
    }
}

/// One event is `event_epochs` passes over the new samples, `n_new` of them
/// per mini-batch; the frozen stage encodes each new sample once with 8-bit
/// operands.
pub fn event_cost(loaded: &Loaded, cfg: &HierarchyConfig) -> Result<EventCost, CliError> {
    let c = &loaded.config;
    let (workload, first) = loaded.workload()?;
    let table = loaded.efficiency_table()?;
    let steps = workload.adaptive_steps(first, c.protocol.batch_size, 4)?;
    let iteration = simulate_steps(&steps, &table, cfg)?;
    let frozen_steps = (0..first)
        .map(|i| workload.lower(i, Step::Fw, c.memsim.event_samples, 1))
        .collect::<qlr_core::Result<Vec<_>>>()?;
    let frozen = simulate_steps(&frozen_steps, &table, cfg)?;
    let iterations = c.memsim.event_samples.div_ceil(c.protocol.n_new) * c.memsim.event_epochs;
    Ok(EventCost {
        iterations,
        iteration,
        frozen,
    })
}

/// Costs one learning event; with `sweep` also the bandwidth/L1/core sweep.
pub fn simulate_cmd(ctx: &Ctx, out: &mut Outputs, sweep: bool) -> Result<(), CliError> {
    let loaded = ctx.loaded;
    let c = &loaded.config;
    let ev = event_cost(loaded, &c.hierarchy)?;
    out.write("cost.csv", ev.iteration.to_csv())?;
    let (al, ae) = ev.adaptive();
    let (tl, te) = ev.total();
    let summary = json!({
        "workload": format!("{:?}", c.memsim.workload),
        "split": loaded.workload()?.1,
        "batch_size": c.protocol.batch_size,
        "iterations_per_event": ev.iterations,
        "iteration": cost_json(&ev.iteration),
        "frozen_event": cost_json(&ev.frozen),
        "adaptive_event": { "latency_s": al, "energy_j": ae },
        "event": { "latency_s": tl, "energy_j": te },
    });
    out.write(SIMULATE_JSON, to_json(&summary))?;
    if sweep {
        let (workload, first) = loaded.workload()?;
        let table = loaded.efficiency_table()?;
        let m = &c.memsim;
        let base = HierarchyConfig {
            duplex: m.sweep_duplex,
            ..c.hierarchy.clone()
        };
        let points = bandwidth_sweep(
            &workload,
            first,
            &base,
            &table,
            &m.sweep_cores,
            &m.sweep_l1,
            &m.sweep_bandwidths,
        )?;
        out.write("sweep.csv", sweep_csv(&points))?;
        let mut spots = String::from("cores,l1_bytes,fraction,bw_bits_per_cycle,mac_per_cycle\n");
        for &cores in &m.sweep_cores {
            for &l1 in &m.sweep_l1 {
                let bw =
                    sweet_spot(&points, cores, l1, SWEET_SPOT_FRACTION).expect("non-empty sweep");
                let at = points
                    .iter()
                    .find(|p| p.cores == cores && p.l1_bytes == l1 && p.bw == bw)
                    .expect("sweet spot is a swept point");
                writeln!(
                    spots,
                    "{cores},{l1},{SWEET_SPOT_FRACTION},{bw},{:.6}",
                    at.mac_per_cycle
                )
                .expect("write to string");
            }
        }
        out.write("sweet_spots.csv", spots)?;
    }
    Ok(())
}

/// Memory breakdown, battery lifetime, platform comparison and the
/// replay-size/accuracy table across latent bitwidths.
pub fn report_cmd(ctx: &Ctx, out: &mut Outputs) -> Result<(), CliError> {
    let loaded = ctx.loaded;
    let c = &loaded.config;
    let sim = out.require(SIMULATE_JSON, "simulate")?;
    let fp = out.require(MODEL_FP32, "calibrate")?;
    let cal = out.require(CALIBRATION, "calibrate")?;

    let (workload, first) = loaded.workload()?;
    let mut memory = String::from(MemoryBreakdown::CSV_HEADER);
    memory.insert_str(0, "q_lr,");
    memory.push('\n');
    for &q in &c.report.pareto_q_lr {
        let p = LatentPrecision::try_from(q).map_err(CliError::Config)?;
        let lr = qlr_core::replay::lr_bytes(c.memsim.n_lr, workload.latent_elems(first), p);
        let m = report_memory_with_payload(&workload, first, lr)?;
        writeln!(memory, "{q},{}", m.csv_row()).expect("write to string");
    }
    out.write("memory.csv", memory)?;

    let simulated: serde_json::Value = serde_json::from_str(&fs::read_to_string(&sim)?)
        .map_err(|e| CliError::Corrupt(format!("{}: {e}", sim.display())))?;
    let field = |v: &serde_json::Value, k: &str| {
        v["event"][k]
            .as_f64()
            .ok_or_else(|| CliError::Corrupt(format!("{} lacks event.{k}", sim.display())))
    };
    let (latency, energy) = (
        field(&simulated, "latency_s")?,
        field(&simulated, "energy_j")?,
    );
    let lt = &c.lifetime;
    let lifetime = report_lifetime(energy, lt.events_per_hour, lt.battery_mah, lt.battery_v);
    let lifetime_json = json!({
        "energy_per_event_j": energy,
        "events_per_hour": lt.events_per_hour,
        "battery_mah": lt.battery_mah,
        "battery_v": lt.battery_v,
        "hours": lifetime.hours(),
    });
    out.write("lifetime.json", to_json(&lifetime_json))?;

    let ours = TargetFigures {
        name: "simulated".into(),
        latency_s: latency,
        energy_j: Some(energy),
        source: "simulated".into(),
    };
    let mut rows = Vec::new();
    if let Some(row) = published_row(first) {
        rows.extend(compare_targets(&ours, &row.baselines()));
        rows.extend(compare_targets(&row.cluster(), &row.baselines()));
    }
    out.write("comparison.csv", comparison_csv(&rows))?;

    let stats = load_stats(&cal)?;
    let (data, split) = stream(loaded)?;
    let mut pareto = String::from("q_lr,n_lr,lr_bytes,final_accuracy,old_class_accuracy\n");
    for &q in &c.report.pareto_q_lr {
        let latent = LatentPrecision::try_from(q).map_err(CliError::Config)?;
        let mut model = load_model(&fp, ctx.workers)?;
        freeze_and_quantize(&mut model, &stats, c.q_bits, latent)?;
        let buffer = build_initial_buffer(&mut model, &split, &c.protocol, c.n_lr)?;
        let bytes = buffer.payload_bytes();
        let o = run_with_buffer(&mut model, &split, &data.test, &c.protocol, buffer)?;
        info!("q_lr {q}: accuracy {:.3}", o.final_accuracy);
        writeln!(
            pareto,
            "{q},{},{bytes},{:.6},{:.6}",
            c.n_lr, o.final_accuracy, o.old_class_accuracy
        )
        .expect("write to string");
    }
    out.write("pareto.csv", pareto)?;
    Ok(())
}
