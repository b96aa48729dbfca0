use thermonet::oracle::*;
use thermonet::pathgen::*;
use thermonet::tensor::*;

fn main() {
    let params = MaterialParams::table1();
    // default config: steps 100, dt 1
    let cfg = PathConfig { sequence_count: 40, ..PathConfig::default_training() };
    let t0 = std::time::Instant::now();
    let d = generate_dataset(&cfg, &params).unwrap();
    println!("default cfg: {} sequences, {} steps total, rejected {}, skipped {}, {:?}",
        d.sequences.len(), d.meta.total_steps, d.meta.rejected_paths, d.meta.skipped_sequences, t0.elapsed());
    println!("stress scale: {:.3} MPa, sigma11 range [{:.2},{:.2}]", d.meta.stress_scale, d.meta.stress_min[0], d.meta.stress_max[0]);
    println!("i1 range [{:.5},{:.5}] i4 range [{:.5},{:.5}]", d.meta.f_min[0], d.meta.f_max[0], d.meta.f_min[3], d.meta.f_max[3]);

    // desk config: steps 10, dt 5
    let cfg2 = PathConfig { sequence_count: 40, steps_per_segment: 10, dt: 5.0, ..PathConfig::default_training() };
    let t0 = std::time::Instant::now();
    let d2 = generate_dataset(&cfg2, &params).unwrap();
    println!("desk cfg: {} seqs, rejected {}, skipped {}, {:?}", d2.sequences.len(), d2.meta.rejected_paths, d2.meta.skipped_sequences, t0.elapsed());

    // dt-halving comparison on 10 paths (same trajectory, double resolution)
    let mut max_rel = 0.0f64;
    for s in 0..10u64 {
        let tgt = sample_targets(&cfg, s, 0);
        let frames = build_path(&tgt, &cfg);
        let cfg_half = PathConfig { steps_per_segment: 200, ..cfg.clone() };
        let frames_half = build_path(&tgt, &cfg_half);
        let amb = cfg.ambient_grid.combos()[s as usize % 4];
        let r1 = integrate_path(&frames, 1.0, &amb, &params).unwrap();
        let r2 = integrate_path(&frames_half, 0.5, &amb, &params).unwrap();
        let s1 = r1.last().unwrap().sigma_total;
        let s2 = r2.last().unwrap().sigma_total;
        let rel = s1.sub(&s2).frobenius_norm() / s2.frobenius_norm().max(1e-9);
        max_rel = max_rel.max(rel);
    }
    println!("dt-halving max relative end-stress change over 10 paths: {:.4e}", max_rel);

    // extrapolation bounds work too
    let cfg3 = PathConfig { sequence_count: 10, ..PathConfig::default_training() }.with_extrapolation_bounds();
    let d3 = generate_dataset(&cfg3, &params).unwrap();
    println!("extrapolation cfg: {} seqs ok, sigma11 range [{:.2},{:.2}]", d3.sequences.len(), d3.meta.stress_min[0], d3.meta.stress_max[0]);
}
