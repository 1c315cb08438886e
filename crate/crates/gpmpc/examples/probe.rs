//! Scratch end-to-end probe: collect, train, fly all three modes, print
//! the comparison numbers.

use gpmpc::gp::residual_predict;
use gpmpc::mpc::{MpcConfig, MpcMode};
use gpmpc::pipeline::{
    collect, precompute_schedule, train_residual_model, Dataset, PipelineConfig,
};
use gpmpc::quad::QuadParams;
use gpmpc::sim::{compute_metrics, run_closed_loop, NoiseConfig, RunSetup, SimConfig};

fn main() {
    let t0 = std::time::Instant::now();
    let params = QuadParams::default();
    let mpc = MpcConfig::default();
    let mut pl = PipelineConfig::default();
    pl.train.seed = 7;

    let noisy = std::env::args().any(|a| a == "--noisy");

    // --- collection runs ---
    let mut parts = Vec::new();
    for run in 0..pl.collect_runs {
        let mut sim = SimConfig::default();
        sim.duration_s = pl.collect_duration_s;
        sim.speed_scale = pl.collect_speed_scale;
        sim.seed = 1000 + run as u64;
        if !noisy {
            sim.noise = NoiseConfig::zero();
        }
        let log = run_closed_loop(&RunSetup {
            mode: MpcMode::Nominal,
            params: &params,
            mpc: &mpc,
            sim: &sim,
            pipeline: &pl,
            model: None,
            schedule: None,
        })
        .unwrap();
        assert!(log.aborted.is_none(), "{:?}", log.aborted);
        parts.push(collect(&log).unwrap());
    }
    let dataset = Dataset::concatenate(parts).unwrap();
    println!("dataset: {} samples ({:.1}s)", dataset.len(), t0.elapsed().as_secs_f64());

    // residual recovery check against the known drag
    let d = SimConfig::default().drag_diag;
    let mut worst = 0.0f64;
    for s in &dataset.samples {
        for i in 0..3 {
            worst = worst.max((s.a_e[i] + d[i] * s.v_body[i]).abs());
        }
    }
    println!("max pointwise |a_e + D v| over samples: {worst:.4}");

    // range of body velocities per axis
    for (i, name) in ["x", "y", "z"].iter().enumerate() {
        let lo = dataset.samples.iter().map(|s| s.v_body[i]).fold(f64::INFINITY, f64::min);
        let hi = dataset.samples.iter().map(|s| s.v_body[i]).fold(f64::NEG_INFINITY, f64::max);
        println!("v_{name} range: [{lo:.2}, {hi:.2}]");
    }

    // --- training ---
    let tt = std::time::Instant::now();
    let model = train_residual_model(&dataset, &pl).unwrap();
    println!("training took {:.1}s", tt.elapsed().as_secs_f64());
    for (gp, name, di) in [
        (&model.gp_x, "x", d[0]),
        (&model.gp_y, "y", d[1]),
        (&model.gp_z, "z", d[2]),
    ] {
        let lo = gp.train_inputs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = gp.train_inputs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut worst = 0.0f64;
        let mut at = 0.0;
        for k in 0..100 {
            let v = lo + (hi - lo) * k as f64 / 99.0;
            if v.abs() > 8.0 {
                continue;
            }
            let err = (gp.predict(v).0 + di * v).abs();
            if err > worst {
                worst = err;
                at = v;
            }
        }
        println!(
            "axis {name}: m={}, L={:.3}, sf2={:.4}, sn2={:.2e}, data [{lo:.2},{hi:.2}], worst |mu+Dv| on range = {worst:.4} at v={at:.2}",
            gp.len(),
            gp.hyper.lengthscale,
            gp.hyper.sigma_f2,
            gp.hyper.sigma_n2
        );
    }
    let (a5, _) = residual_predict(&model, &nalgebra::Vector3::new(5.0, 0.0, 0.0));
    println!("mu(5,0,0) = {:?} (want ~(-1.5, ~0, ~0))", a5);

    // --- evaluation runs ---
    let mut eval = SimConfig::default();
    eval.duration_s = 16.0;
    eval.speed_scale = 1.0;
    eval.seed = 42;
    if !noisy {
        eval.noise = NoiseConfig::zero();
    }
    let reference = eval.reference(&params);
    let schedule = precompute_schedule(
        &model,
        &reference,
        eval.control_dt(),
        eval.duration_s + mpc.horizon_t + 1.0,
    );

    // timeline diagnostics for precomputed mode
    {
        let log = run_closed_loop(&RunSetup {
            mode: MpcMode::Precomputed,
            params: &params,
            mpc: &mpc,
            sim: &eval,
            pipeline: &pl,
            model: Some(&model),
            schedule: Some(&schedule),
        })
        .unwrap();
        for row in log.rows.iter().step_by(25) {
            let dev = (row.truth.p - row.reference.p).norm();
            println!(
                "t {:5.2}  dev {:7.3}  speed {:6.2}  src {:?}  u {:?}",
                row.t, dev, row.truth.v.norm(), row.correction_source, row.input.thrusts
            );
        }
    }

    let mut results = Vec::new();
    for mode in [MpcMode::Nominal, MpcMode::Precomputed, MpcMode::Direct] {
        let tr = std::time::Instant::now();
        let log = run_closed_loop(&RunSetup {
            mode,
            params: &params,
            mpc: &mpc,
            sim: &eval,
            pipeline: &pl,
            model: Some(&model),
            schedule: Some(&schedule),
        })
        .unwrap();
        assert!(log.aborted.is_none(), "{mode:?}: {:?}", log.aborted);
        let m = compute_metrics(&log).unwrap();
        println!(
            "{:<12} rmse {:8.2} mm  xy {:8.2} mm  vmax {:5.2}  solve mean {:.3} ms median {:.3} p95 {:.3}  wall {:.1}s",
            m.mode, m.rmse_pos_mm, m.rmse_xy_mm, m.max_speed_achieved,
            m.mean_solve_time_ms, m.median_solve_time_ms, m.p95_solve_time_ms,
            tr.elapsed().as_secs_f64(),
        );
        results.push(m);
    }
    let base = results[0].rmse_pos_mm;
    for m in &results[1..] {
        println!(
            "{:<12} reduction {:.1}%",
            m.mode,
            100.0 * (1.0 - m.rmse_pos_mm / base)
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
