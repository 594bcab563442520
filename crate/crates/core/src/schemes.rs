//! Scheduling policies: the solver-driven scheme and three benchmarks
//! (uniform random, best-channel greedy, round-robin age-based).
//!
//! Benchmarks split bandwidth equally among whoever they select; the random
//! benchmark splits across all clients since any subset may upload. Each
//! policy implements the engine's per-round `RoundPolicy` hook.

use crate::engine::{EngineError, RoundPlan, RoundPolicy};
use crate::solver::{solve_online, OnlineInstance, SolverSettings};
use crate::wireless::{CellConfig, ClientProfile};

/// Everyone uploads with the same probability; bandwidth is pre-split
/// equally across all clients.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    p_const: f64,
    clients: usize,
}

impl RandomPolicy {
    pub fn new(p_const: f64, clients: usize) -> Result<Self, EngineError> {
        if !(0.0..=1.0).contains(&p_const) {
            return Err(EngineError::BadSetup(format!(
                "uniform probability {p_const} outside [0, 1]"
            )));
        }
        if clients == 0 {
            return Err(EngineError::BadSetup("no clients".into()));
        }
        Ok(Self { p_const, clients })
    }
}

impl RoundPolicy for RandomPolicy {
    fn plan(&mut self, _round: u64, _gains: &[f64]) -> Result<RoundPlan, EngineError> {
        Ok(RoundPlan {
            p: vec![self.p_const; self.clients],
            w: vec![1.0 / self.clients as f64; self.clients],
        })
    }
    fn name(&self) -> &'static str {
        "random"
    }
}

/// Deterministically selects the k_sel clients with the largest current
/// channel gain, ties to the lower id, equal bandwidth among the selected.
#[derive(Debug, Clone)]
pub struct GreedyPolicy {
    k_sel: usize,
    clients: usize,
}

impl GreedyPolicy {
    pub fn new(k_sel: usize, clients: usize) -> Result<Self, EngineError> {
        check_k_sel(k_sel, clients)?;
        Ok(Self { k_sel, clients })
    }
}

impl RoundPolicy for GreedyPolicy {
    fn plan(&mut self, round: u64, gains: &[f64]) -> Result<RoundPlan, EngineError> {
        if gains.len() != self.clients {
            return Err(EngineError::BadPlan {
                round,
                reason: format!("{} gains for {} clients", gains.len(), self.clients),
            });
        }
        let mut order: Vec<usize> = (0..self.clients).collect();
        order.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]).then(a.cmp(&b)));
        Ok(deterministic_plan(&order[..self.k_sel], self.clients))
    }
    fn name(&self) -> &'static str {
        "greedy"
    }
}

/// Round-robin blocks of k_sel consecutive ids wrapping modulo K: round r
/// starts at index (r * k_sel) mod K.
#[derive(Debug, Clone)]
pub struct AgeBasedPolicy {
    k_sel: usize,
    clients: usize,
}

impl AgeBasedPolicy {
    pub fn new(k_sel: usize, clients: usize) -> Result<Self, EngineError> {
        check_k_sel(k_sel, clients)?;
        Ok(Self { k_sel, clients })
    }
}

impl RoundPolicy for AgeBasedPolicy {
    fn plan(&mut self, round: u64, _gains: &[f64]) -> Result<RoundPlan, EngineError> {
        let start = (round as usize * self.k_sel) % self.clients;
        let set: Vec<usize> = (0..self.k_sel)
            .map(|i| (start + i) % self.clients)
            .collect();
        Ok(deterministic_plan(&set, self.clients))
    }
    fn name(&self) -> &'static str {
        "age_based"
    }
}

/// Re-solves the single-round scheduling problem against the current gains.
/// Identical consecutive channel realizations (static fading) reuse the
/// cached plan instead of re-running the solver.
#[derive(Debug, Clone)]
pub struct ProposedPolicy {
    cell: CellConfig,
    profiles: Vec<ClientProfile>,
    rho: f64,
    lambda_min: f64,
    horizon_rounds: usize,
    settings: SolverSettings,
    cache: Option<(Vec<u64>, RoundPlan)>,
}

impl ProposedPolicy {
    pub fn new(
        cell: CellConfig,
        profiles: Vec<ClientProfile>,
        rho: f64,
        lambda_min: f64,
        horizon_rounds: usize,
        settings: SolverSettings,
    ) -> Result<Self, EngineError> {
        if profiles.is_empty() {
            return Err(EngineError::BadSetup("no clients".into()));
        }
        Ok(Self {
            cell,
            profiles,
            rho,
            lambda_min,
            horizon_rounds,
            settings,
            cache: None,
        })
    }
}

impl RoundPolicy for ProposedPolicy {
    fn plan(&mut self, _round: u64, gains: &[f64]) -> Result<RoundPlan, EngineError> {
        let key: Vec<u64> = gains.iter().map(|g| g.to_bits()).collect();
        if let Some((cached_key, plan)) = &self.cache {
            if *cached_key == key {
                return Ok(plan.clone());
            }
        }
        let inst = OnlineInstance::new(
            self.horizon_rounds,
            self.rho,
            self.lambda_min,
            self.cell.clone(),
            self.profiles.clone(),
            gains.to_vec(),
        )?;
        let out = solve_online(&inst, &self.settings)?;
        let plan = RoundPlan { p: out.p, w: out.w };
        self.cache = Some((key, plan.clone()));
        Ok(plan)
    }
    fn name(&self) -> &'static str {
        "proposed"
    }
}

/// Benchmark k_sel matched to the solver-driven scheme's expected participant
/// count, at least one.
pub fn calibrated_k_sel(p: &[f64]) -> usize {
    let expected: f64 = p.iter().sum();
    (expected.round() as usize).clamp(1, p.len().max(1))
}

fn check_k_sel(k_sel: usize, clients: usize) -> Result<(), EngineError> {
    if clients == 0 {
        return Err(EngineError::BadSetup("no clients".into()));
    }
    if k_sel == 0 || k_sel > clients {
        return Err(EngineError::BadSetup(format!(
            "k_sel = {k_sel} outside 1..={clients}"
        )));
    }
    Ok(())
}

fn deterministic_plan(selected: &[usize], clients: usize) -> RoundPlan {
    let mut p = vec![0.0; clients];
    let mut w = vec![0.0; clients];
    let share = 1.0 / selected.len() as f64;
    for &k in selected {
        p[k] = 1.0;
        w[k] = share;
    }
    RoundPlan { p, w }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::sample_selection;
    use crate::seedmix;

    fn cell() -> CellConfig {
        CellConfig {
            total_bandwidth_hz: 5e6,
            noise_density_w_per_hz: 10f64.powf(-20.4),
            model_size_bits: 6.37e6,
            cell_radius_km: 1.0,
        }
    }

    fn profiles(distances: &[f64]) -> Vec<ClientProfile> {
        distances
            .iter()
            .enumerate()
            .map(|(k, &d)| ClientProfile {
                id: k + 1,
                distance_km: d,
                tx_power_w: 0.2,
            })
            .collect()
    }

    fn selected_ids(plan: &RoundPlan) -> Vec<usize> {
        plan.p
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == 1.0)
            .map(|(k, _)| k + 1)
            .collect()
    }

    #[test]
    fn random_policy_extremes() {
        let mut all = RandomPolicy::new(1.0, 4).unwrap();
        let plan = all.plan(0, &[0.0; 4]).unwrap();
        assert_eq!(plan.p, vec![1.0; 4]);
        assert_eq!(plan.w, vec![0.25; 4]);
        let mut none = RandomPolicy::new(0.0, 4).unwrap();
        assert_eq!(none.plan(0, &[0.0; 4]).unwrap().p, vec![0.0; 4]);
        assert!(RandomPolicy::new(1.5, 4).is_err());
    }

    #[test]
    fn random_policy_hits_expected_participation() {
        // 1e5 simulated rounds at p = 0.1 with 10 clients: mean participants
        // per round within 5% of K * p = 1.
        let mut policy = RandomPolicy::new(0.1, 10).unwrap();
        let plan = policy.plan(0, &[0.0; 10]).unwrap();
        let mut total = 0usize;
        let rounds = 100_000u64;
        for r in 0..rounds {
            total += sample_selection(&plan.p, r, 77, None).unwrap().len();
        }
        let mean = total as f64 / rounds as f64;
        assert!((0.95..=1.05).contains(&mean), "mean participants {mean}");
    }

    #[test]
    fn greedy_picks_largest_gains_with_id_ties() {
        let mut policy = GreedyPolicy::new(2, 3).unwrap();
        let plan = policy.plan(0, &[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(selected_ids(&plan), vec![1, 3]);
        assert_eq!(plan.w, vec![0.5, 0.0, 0.5]);
        let tied = policy.plan(1, &[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(selected_ids(&tied), vec![1, 2]);
    }

    #[test]
    fn greedy_matches_full_sort_oracle() {
        let mut rng = seedmix::rng_for(31, &[9]);
        for trial in 0..200 {
            let k_n = 2 + (trial % 7);
            let k_sel = 1 + (trial % k_n);
            let gains: Vec<f64> = (0..k_n)
                .map(|_| rand::Rng::random_range(&mut rng, 1e-13..1e-9))
                .collect();
            let mut policy = GreedyPolicy::new(k_sel, k_n).unwrap();
            let plan = policy.plan(trial as u64, &gains).unwrap();
            // Oracle: stable sort of (gain, id) pairs descending by gain.
            let mut pairs: Vec<(f64, usize)> =
                gains.iter().enumerate().map(|(k, &g)| (g, k)).collect();
            pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut expect: Vec<usize> = pairs[..k_sel].iter().map(|&(_, k)| k + 1).collect();
            expect.sort_unstable();
            assert_eq!(selected_ids(&plan), expect);
        }
    }

    #[test]
    fn age_based_walks_contiguous_blocks() {
        let mut policy = AgeBasedPolicy::new(2, 4).unwrap();
        let r0 = policy.plan(0, &[0.0; 4]).unwrap();
        assert_eq!(selected_ids(&r0), vec![1, 2]);
        let r1 = policy.plan(1, &[0.0; 4]).unwrap();
        assert_eq!(selected_ids(&r1), vec![3, 4]);
        let r2 = policy.plan(2, &[0.0; 4]).unwrap();
        assert_eq!(selected_ids(&r2), vec![1, 2]);
    }

    #[test]
    fn age_based_selects_everyone_equally_often() {
        // Counting oracle over one full cycle of K / gcd(K, k_sel) rounds.
        for (k_n, k_sel) in [(6usize, 2usize), (6, 4), (5, 2), (8, 3)] {
            let g = gcd(k_n, k_sel);
            let cycle = (k_n / g) as u64;
            let mut counts = vec![0usize; k_n];
            let mut policy = AgeBasedPolicy::new(k_sel, k_n).unwrap();
            for r in 0..cycle {
                for id in selected_ids(&policy.plan(r, &[0.0; 8]).unwrap()) {
                    counts[id - 1] += 1;
                }
            }
            let expect = k_sel * cycle as usize / k_n;
            assert!(
                counts.iter().all(|&c| c == expect),
                "K={k_n} k_sel={k_sel}: {counts:?}"
            );
        }
    }

    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }

    #[test]
    fn all_policies_emit_feasible_bandwidth() {
        let gains = [2e-13, 8e-13, 5e-13, 1e-12, 3e-13];
        let mut policies: Vec<Box<dyn RoundPolicy>> = vec![
            Box::new(RandomPolicy::new(0.4, 5).unwrap()),
            Box::new(GreedyPolicy::new(3, 5).unwrap()),
            Box::new(AgeBasedPolicy::new(2, 5).unwrap()),
        ];
        for policy in policies.iter_mut() {
            for round in 0..7 {
                let plan = policy.plan(round, &gains).unwrap();
                let total: f64 = plan.w.iter().sum();
                assert!(total <= 1.0 + 1e-12, "{} sums to {total}", policy.name());
                assert!(plan.w.iter().all(|&w| (0.0..=1.0).contains(&w)));
                assert!(plan.p.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn proposed_gives_symmetric_clients_identical_plans() {
        let prof = profiles(&[0.4, 0.4, 0.4]);
        let gains: Vec<f64> = vec![1e-12; 3];
        let mut policy = ProposedPolicy::new(
            cell(),
            prof,
            0.3,
            0.05,
            50,
            SolverSettings::default(),
        )
        .unwrap();
        let plan = policy.plan(0, &gains).unwrap();
        for k in 1..3 {
            assert!((plan.p[k] - plan.p[0]).abs() < 1e-9);
            assert!((plan.w[k] - plan.w[0]).abs() < 1e-9);
        }
        assert!(plan.p[0] > 0.05 && plan.p[0] <= 1.0);
    }

    #[test]
    fn proposed_clamps_to_floor_when_energy_dominates() {
        let prof = profiles(&[0.9, 0.95]);
        let gains = vec![1e-13, 1.2e-13];
        let mut policy = ProposedPolicy::new(
            cell(),
            prof,
            1e-4,
            0.05,
            100,
            SolverSettings::default(),
        )
        .unwrap();
        let plan = policy.plan(0, &gains).unwrap();
        for &p in &plan.p {
            assert!((p - 0.05).abs() < 1e-6, "p = {p}");
        }
    }

    #[test]
    fn proposed_caches_identical_gains() {
        let prof = profiles(&[0.3, 0.6]);
        let gains = vec![5e-12, 8e-13];
        let mut policy = ProposedPolicy::new(
            cell(),
            prof,
            0.2,
            0.05,
            20,
            SolverSettings::default(),
        )
        .unwrap();
        let a = policy.plan(0, &gains).unwrap();
        let b = policy.plan(1, &gains).unwrap();
        assert_eq!(a.p, b.p);
        assert_eq!(a.w, b.w);
        let other = vec![5e-12, 9e-13];
        let c = policy.plan(2, &other).unwrap();
        assert!(a.p != c.p || a.w != c.w);
    }

    #[test]
    fn proposed_participation_frequency_matches_probabilities() {
        // Simulated selection under the solved plan: mean participants per
        // round close to sum(p) over 2e4 rounds.
        let prof = profiles(&[0.2, 0.5, 0.8]);
        let gains: Vec<f64> = prof
            .iter()
            .map(|c| {
                crate::wireless::channel_gain(c, 0, crate::wireless::FadingConfig::Static, 0)
                    .unwrap()
            })
            .collect();
        let mut policy = ProposedPolicy::new(
            cell(),
            prof,
            0.5,
            0.05,
            100,
            SolverSettings::default(),
        )
        .unwrap();
        let plan = policy.plan(0, &gains).unwrap();
        let expected: f64 = plan.p.iter().sum();
        let rounds = 20_000u64;
        let mut total = 0usize;
        for r in 0..rounds {
            total += sample_selection(&plan.p, r, 909, None).unwrap().len();
        }
        let mean = total as f64 / rounds as f64;
        assert!(
            (mean - expected).abs() <= 0.05 * expected.max(0.5),
            "mean {mean} vs sum p {expected}"
        );
    }

    #[test]
    fn calibration_rounds_expected_participants() {
        assert_eq!(calibrated_k_sel(&[0.9, 0.8, 0.6, 0.4]), 3);
        assert_eq!(calibrated_k_sel(&[0.05, 0.05, 0.05]), 1);
        assert_eq!(calibrated_k_sel(&[1.0; 5]), 5);
        // Never exceeds the client count even with rounding up.
        assert_eq!(calibrated_k_sel(&[0.9, 0.7]), 2);
    }

    #[test]
    fn k_sel_bounds_are_enforced() {
        assert!(GreedyPolicy::new(0, 3).is_err());
        assert!(GreedyPolicy::new(4, 3).is_err());
        assert!(AgeBasedPolicy::new(6, 5).is_err());
    }
}
