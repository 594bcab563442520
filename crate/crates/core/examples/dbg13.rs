use asyncfl_core::config::ExperimentConfig;
use asyncfl_core::engine::SeedSet;
use asyncfl_core::experiment::{plan_at_round_zero, run_one};

fn cfg(scheme: &str) -> ExperimentConfig {
    let text = format!(
        r#"{{
        "cell": {{ "total_bandwidth_hz": 5e6, "noise_density_dbm_per_hz": -174, "cell_radius_km": 1.0 }},
        "clients": {{ "placement": "annulus", "count": 10, "inner_radius_km": 0.1, "outer_radius_km": 1.0, "tx_power_w": 0.2 }},
        "task": {{ "classes": 5, "feature_dim": 10, "hidden": 16, "per_class_train": 40, "per_class_test": 20,
                   "separation": 3.0, "shards_per_client": 1, "local_steps": 1, "batch": 5, "learning_rate": 0.05 }},
        "scheme": {scheme},
        "rounds": 400,
        "rho": 0.0004,
        "seeds": 1,
        "eval_every": 0
    }}"#
    );
    ExperimentConfig::from_str(&text).unwrap()
}

fn main() {
    let rho = 0.0004;
    for seed in [21u64, 23] {
        let seed_set = SeedSet::from_base(seed);
        let prop_cfg = cfg(r#"{ "name": "proposed" }"#);
        let plan = plan_at_round_zero(&prop_cfg, rho, seed_set).unwrap();
        let p_bar = plan.p.iter().sum::<f64>() / plan.p.len() as f64;
        println!("== seed {seed}: p_bar {p_bar:.6}");
        println!("   p: {:?}", plan.p.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
        println!("   w: {:?}", plan.w.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
        let proposed = run_one(&prop_cfg, rho, seed_set).unwrap();
        let rand_cfg = cfg(&format!(r#"{{ "name": "random", "p": {p_bar} }}"#));
        let random = run_one(&rand_cfg, rho, seed_set).unwrap();
        println!(
            "   realized: prop {:.6e} rand {:.6e} | expected: prop {:.6e} rand {:.6e}",
            proposed.summary.total_realized_energy_j,
            random.summary.total_realized_energy_j,
            proposed.summary.total_expected_energy_j,
            random.summary.total_expected_energy_j
        );
        println!(
            "   participations: prop {} rand {}",
            proposed.summary.total_participations, random.summary.total_participations
        );
        for k in 0..10 {
            println!(
                "   client {k}: prop {:.5e}  rand {:.5e}",
                proposed.summary.per_client_energy_j[k], random.summary.per_client_energy_j[k]
            );
        }
    }
}
