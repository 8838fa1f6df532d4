//! Restless-arm environments.
//!
//! Every arm exposes its transition kernel as an explicit [`Distribution`]
//! (used by the oracle) and can be sampled step by step (used by the
//! simulator and learners). Action `0` is the null resource; actions
//! `1..=H` are the real resources.

use rand::Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Action id: `0` is idle, `h >= 1` is resource `h`.
pub type ActionId = usize;

const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArmState {
    value: usize,
    cap: usize,
}

impl ArmState {
    pub fn new(value: usize, cap: usize) -> Result<Self> {
        if cap < 1 || value > cap {
            return Err(Error::InvalidState { value, floor: 0, cap });
        }
        Ok(Self { value, cap })
    }

    pub fn value(&self) -> usize {
        self.value
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    fn with_value(self, value: usize) -> Self {
        Self {
            value: value.min(self.cap),
            cap: self.cap,
        }
    }

    fn incremented(self) -> Self {
        self.with_value(self.value + 1)
    }
}

/// Finite next-state distribution with distinct outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    outcomes: Vec<(ArmState, f64)>,
}

impl Distribution {
    /// Builds a distribution, merging repeated outcomes and dropping zero
    /// masses. Fails on negative mass or when masses do not sum to one.
    pub fn from_masses(masses: impl IntoIterator<Item = (ArmState, f64)>) -> Result<Self> {
        let mut outcomes: Vec<(ArmState, f64)> = Vec::new();
        for (state, mass) in masses {
            if !(mass >= 0.0) || !mass.is_finite() {
                return Err(Error::InvalidDistribution(format!(
                    "mass {mass} for state {}",
                    state.value()
                )));
            }
            if mass == 0.0 {
                continue;
            }
            match outcomes.iter_mut().find(|(s, _)| *s == state) {
                Some((_, m)) => *m += mass,
                None => outcomes.push((state, mass)),
            }
        }
        let total: f64 = outcomes.iter().map(|(_, m)| m).sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("masses sum to {total}")));
        }
        Ok(Self { outcomes })
    }

    pub fn certain(state: ArmState) -> Self {
        Self {
            outcomes: vec![(state, 1.0)],
        }
    }

    pub fn outcomes(&self) -> &[(ArmState, f64)] {
        &self.outcomes
    }

    /// Probability of landing in the state with the given value.
    pub fn prob(&self, value: usize) -> f64 {
        self.outcomes
            .iter()
            .filter(|(s, _)| s.value() == value)
            .map(|(_, m)| m)
            .sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.outcomes.iter().map(|(_, m)| m).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ArmState {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(state, mass) in &self.outcomes {
            acc += mass;
            if u < acc {
                return state;
            }
        }
        // rounding left u above the accumulated total
        self.outcomes[self.outcomes.len() - 1].0
    }
}

fn check_action(action: ActionId, num_resources: usize) -> Result<()> {
    if action > num_resources {
        return Err(Error::ActionOutOfRange {
            action,
            num_actions: num_resources + 1,
        });
    }
    Ok(())
}

/// Age-of-information kernel: idle ages by one; serving on resource `h`
/// resets the age to 1 with probability `success[h-1]`.
pub fn aoi_kernel(state: ArmState, action: ActionId, success: &[f64]) -> Result<Distribution> {
    check_action(action, success.len())?;
    let aged = state.incremented();
    if action == 0 {
        return Ok(Distribution::certain(aged));
    }
    let p = success[action - 1];
    Distribution::from_masses([(state.with_value(1), p), (aged, 1.0 - p)])
}

pub fn aoi_reward(next: ArmState) -> f64 {
    -(next.value() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AoiArmParams {
    pub success: Vec<f64>,
    pub cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueArmParams {
    /// Per-step packet arrival probability.
    pub arrival: f64,
    /// Departure probability per resource.
    pub success: Vec<f64>,
    pub cap: usize,
}

/// Queue-length kernel with Bernoulli arrivals and, when served, Bernoulli
/// departures. Coinciding outcomes at the floor or the cap are merged.
pub fn queue_kernel(state: ArmState, action: ActionId, params: &QueueArmParams) -> Result<Distribution> {
    check_action(action, params.success.len())?;
    let zeta = params.arrival;
    let up = state.incremented();
    if action == 0 {
        return Distribution::from_masses([(up, zeta), (state, 1.0 - zeta)]);
    }
    let p = params.success[action - 1];
    let down = state.with_value(state.value().saturating_sub(1));
    Distribution::from_masses([
        (up, (1.0 - p) * zeta),
        (state, (1.0 - p) * (1.0 - zeta) + p * zeta),
        (down, p * (1.0 - zeta)),
    ])
}

pub fn queue_reward(state: ArmState) -> f64 {
    let s = state.value() as f64;
    -s * s
}

/// Sign convention of the ad reward exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdRewardForm {
    /// `theta0 * (1 - exp(-theta1 * s))`: interest recovers with elapsed time.
    #[default]
    Recovering,
    /// `theta0 * (1 - exp(theta1 * s))`, the exponent taken literally.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdArmParams {
    pub theta0: Vec<f64>,
    pub theta1: Vec<f64>,
    pub cap: usize,
    #[serde(default)]
    pub form: AdRewardForm,
}

/// Recovering-ad kernel: elapsed time grows while not displayed and resets
/// to 1 on display.
pub fn ad_kernel(state: ArmState, action: ActionId, num_resources: usize) -> Result<Distribution> {
    check_action(action, num_resources)?;
    if action == 0 {
        Ok(Distribution::certain(state.incremented()))
    } else {
        Ok(Distribution::certain(state.with_value(1)))
    }
}

pub fn ad_reward(state: ArmState, action: ActionId, params: &AdArmParams) -> f64 {
    if action == 0 || action > params.theta0.len() {
        return 0.0;
    }
    let theta0 = params.theta0[action - 1];
    let rate = params.theta1[action - 1] * state.value() as f64;
    match params.form {
        AdRewardForm::Recovering => theta0 * (1.0 - (-rate).exp()),
        AdRewardForm::Literal => theta0 * (1.0 - rate.exp()),
    }
}

/// Arbitrary finite arm given by explicit tables over states `floor..=cap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularArm {
    pub floor: usize,
    pub cap: usize,
    /// `kernel[s - floor][a]` lists `(next_value, prob)`.
    pub kernel: Vec<Vec<Vec<(usize, f64)>>>,
    /// `reward[s - floor][a]`.
    pub reward: Vec<Vec<f64>>,
}

impl TabularArm {
    /// Single-state arm where resource `h` yields a per-step gain
    /// `gains[h-1]` and idling yields zero.
    pub fn one_state(gains: &[f64]) -> Self {
        let actions = gains.len() + 1;
        let mut reward = vec![0.0];
        reward.extend_from_slice(gains);
        Self {
            floor: 1,
            cap: 1,
            kernel: vec![vec![vec![(1, 1.0)]; actions]],
            reward: vec![reward],
        }
    }
}

/// Specification of a single restless arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArmSpec {
    Aoi(AoiArmParams),
    Queue(QueueArmParams),
    Ad(AdArmParams),
    Tabular(TabularArm),
}

impl ArmSpec {
    pub fn num_resources(&self) -> usize {
        match self {
            ArmSpec::Aoi(p) => p.success.len(),
            ArmSpec::Queue(p) => p.success.len(),
            ArmSpec::Ad(p) => p.theta0.len(),
            ArmSpec::Tabular(t) => t.reward[0].len() - 1,
        }
    }

    pub fn num_actions(&self) -> usize {
        self.num_resources() + 1
    }

    /// Smallest reachable state value.
    pub fn floor(&self) -> usize {
        match self {
            ArmSpec::Aoi(_) | ArmSpec::Ad(_) => 1,
            ArmSpec::Queue(_) => 0,
            ArmSpec::Tabular(t) => t.floor,
        }
    }

    pub fn cap(&self) -> usize {
        match self {
            ArmSpec::Aoi(p) => p.cap,
            ArmSpec::Queue(p) => p.cap,
            ArmSpec::Ad(p) => p.cap,
            ArmSpec::Tabular(t) => t.cap,
        }
    }

    pub fn num_states(&self) -> usize {
        self.cap() - self.floor() + 1
    }

    pub fn state(&self, value: usize) -> Result<ArmState> {
        if value < self.floor() || value > self.cap() {
            return Err(Error::InvalidState {
                value,
                floor: self.floor(),
                cap: self.cap(),
            });
        }
        ArmState::new(value, self.cap())
    }

    /// All states in increasing order.
    pub fn states(&self) -> Vec<ArmState> {
        (self.floor()..=self.cap())
            .map(|v| ArmState { value: v, cap: self.cap() })
            .collect()
    }

    pub fn initial_state(&self) -> ArmState {
        ArmState {
            value: self.floor(),
            cap: self.cap(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: &f64| (0.0..=1.0).contains(p);
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        match self {
            ArmSpec::Aoi(p) => {
                if p.cap < 1 || !p.success.iter().all(prob_ok) {
                    return bad("aoi arm needs cap >= 1 and success probabilities in [0,1]");
                }
            }
            ArmSpec::Queue(p) => {
                if p.cap < 1 || !prob_ok(&p.arrival) || !p.success.iter().all(prob_ok) {
                    return bad("queue arm needs cap >= 1 and probabilities in [0,1]");
                }
            }
            ArmSpec::Ad(p) => {
                if p.cap < 1 || p.theta0.len() != p.theta1.len() || !p.theta1.iter().all(|t| *t > 0.0) {
                    return bad("ad arm needs cap >= 1 and positive theta1 per placement");
                }
            }
            ArmSpec::Tabular(t) => {
                if t.cap < t.floor || t.cap < 1 || t.kernel.len() != t.cap - t.floor + 1 || t.reward.len() != t.kernel.len() {
                    return bad("tabular arm tables do not cover floor..=cap");
                }
                for s in self.states() {
                    for a in 0..self.num_actions() {
                        self.kernel(s, a)?;
                    }
                }
            }
        }
        if self.num_resources() == 0 {
            return bad("arm needs at least one resource");
        }
        Ok(())
    }

    pub fn kernel(&self, state: ArmState, action: ActionId) -> Result<Distribution> {
        match self {
            ArmSpec::Aoi(p) => aoi_kernel(state, action, &p.success),
            ArmSpec::Queue(p) => queue_kernel(state, action, p),
            ArmSpec::Ad(p) => ad_kernel(state, action, p.theta0.len()),
            ArmSpec::Tabular(t) => {
                check_action(action, self.num_resources())?;
                let row = &t.kernel[state.value() - t.floor][action];
                let masses = row
                    .iter()
                    .map(|&(v, m)| self.state(v).map(|s| (s, m)))
                    .collect::<Result<Vec<_>>>()?;
                Distribution::from_masses(masses)
            }
        }
    }

    /// Realized reward of the transition `state --action--> next`.
    ///
    /// AoI rewards depend on the next state, queue rewards on the current
    /// state, ad rewards on the current state and the placement.
    pub fn reward(&self, state: ArmState, action: ActionId, next: ArmState) -> f64 {
        match self {
            ArmSpec::Aoi(_) => aoi_reward(next),
            ArmSpec::Queue(_) => queue_reward(state),
            ArmSpec::Ad(p) => ad_reward(state, action, p),
            ArmSpec::Tabular(t) => t.reward[state.value() - t.floor][action],
        }
    }

    /// Expected reward `R(s, a)` under the kernel.
    pub fn mean_reward(&self, state: ArmState, action: ActionId) -> Result<f64> {
        let dist = self.kernel(state, action)?;
        Ok(dist
            .outcomes()
            .iter()
            .map(|&(next, m)| m * self.reward(state, action, next))
            .sum())
    }
}

/// Draws the next state from the arm's kernel and returns it with the
/// realized reward.
pub fn sample_step<R: Rng + ?Sized>(
    spec: &ArmSpec,
    state: ArmState,
    action: ActionId,
    rng: &mut R,
) -> Result<(ArmState, f64)> {
    let next = spec.kernel(state, action)?.sample(rng);
    Ok((next, spec.reward(state, action, next)))
}

/// Success probabilities `p[n][h]` of arm `n` on resource `h + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub success: Vec<Vec<f64>>,
}

impl ChannelModel {
    pub fn new(success: Vec<Vec<f64>>) -> Result<Self> {
        if success.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig("success probabilities must lie in [0,1]".into()));
        }
        Ok(Self { success })
    }

    /// Most reliable resource for arm `n`, ties toward the lower id.
    pub fn best_resource(&self, n: usize) -> ActionId {
        let row = &self.success[n];
        let mut best = 0;
        for (h, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = h;
            }
        }
        best + 1
    }
}

/// A live arm: its spec, current state and optional reward noise.
#[derive(Debug, Clone)]
pub struct ArmEnv {
    pub spec: ArmSpec,
    pub state: ArmState,
    /// Standard deviation of additive Gaussian reward noise (0 = none).
    pub reward_noise: f64,
}

impl ArmEnv {
    pub fn new(spec: ArmSpec) -> Self {
        let state = spec.initial_state();
        Self {
            spec,
            state,
            reward_noise: 0.0,
        }
    }

    /// Applies `action`, advances the state and returns
    /// `(previous_state, reward, next_state)`.
    pub fn step<R: Rng + ?Sized>(&mut self, action: ActionId, rng: &mut R) -> Result<(ArmState, f64, ArmState)> {
        let prev = self.state;
        let (next, mut reward) = sample_step(&self.spec, prev, action, rng)?;
        if self.reward_noise > 0.0 {
            let noise = Normal::new(0.0, self.reward_noise)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            reward += noise.sample(rng);
        }
        self.state = next;
        Ok((prev, reward, next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn st(v: usize, cap: usize) -> ArmState {
        ArmState::new(v, cap).unwrap()
    }

    fn assert_dist(d: &Distribution, expected: &[(usize, f64)]) {
        assert_eq!(d.outcomes().len(), expected.len(), "{d:?}");
        for &(v, p) in expected {
            assert!((d.prob(v) - p).abs() < 1e-12, "P({v}) = {} != {p}", d.prob(v));
        }
        assert!((d.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aoi_kernel_examples() {
        assert_dist(&aoi_kernel(st(5, 20), 0, &[0.7, 0.3]).unwrap(), &[(6, 1.0)]);
        assert_dist(&aoi_kernel(st(20, 20), 0, &[0.7, 0.3]).unwrap(), &[(20, 1.0)]);
        assert_dist(&aoi_kernel(st(7, 20), 1, &[0.7, 0.3]).unwrap(), &[(1, 0.7), (8, 0.3)]);
        assert!(matches!(
            aoi_kernel(st(7, 20), 3, &[0.7, 0.3]),
            Err(Error::ActionOutOfRange { action: 3, .. })
        ));
    }

    #[test]
    fn aoi_rewards() {
        assert_eq!(aoi_reward(st(6, 20)), -6.0);
        assert_eq!(aoi_reward(st(1, 20)), -1.0);
        assert_eq!(aoi_reward(st(20, 20)), -20.0);
    }

    #[test]
    fn queue_kernel_examples() {
        let params = QueueArmParams {
            arrival: 0.11,
            success: vec![0.7],
            cap: 20,
        };
        assert_dist(&queue_kernel(st(3, 20), 0, &params).unwrap(), &[(4, 0.11), (3, 0.89)]);
        assert_dist(
            &queue_kernel(st(3, 20), 1, &params).unwrap(),
            &[(4, 0.033), (3, 0.344), (2, 0.623)],
        );
        assert_dist(&queue_kernel(st(0, 20), 1, &params).unwrap(), &[(1, 0.033), (0, 0.967)]);
        // the cap merges the arrival and stay branches
        assert_dist(&queue_kernel(st(20, 20), 0, &params).unwrap(), &[(20, 1.0)]);
        assert_dist(
            &queue_kernel(st(20, 20), 1, &params).unwrap(),
            &[(20, 0.3 * 0.11 + 0.3 * 0.89 + 0.7 * 0.11), (19, 0.7 * 0.89)],
        );
    }

    #[test]
    fn queue_rewards() {
        assert_eq!(queue_reward(st(0, 20)), 0.0);
        assert_eq!(queue_reward(st(3, 20)), -9.0);
        assert_eq!(queue_reward(st(20, 20)), -400.0);
    }

    #[test]
    fn ad_kernel_and_reward() {
        assert_dist(&ad_kernel(st(4, 20), 0, 3).unwrap(), &[(5, 1.0)]);
        assert_dist(&ad_kernel(st(4, 20), 2, 3).unwrap(), &[(1, 1.0)]);
        assert_dist(&ad_kernel(st(20, 20), 0, 3).unwrap(), &[(20, 1.0)]);

        let params = AdArmParams {
            theta0: vec![5.0],
            theta1: vec![0.1],
            cap: 20,
            form: AdRewardForm::Recovering,
        };
        assert!((ad_reward(st(10, 20), 1, &params) - 3.160_602_794_142_788).abs() < 1e-12);
        assert_eq!(ad_reward(st(10, 20), 0, &params), 0.0);

        let steep = AdArmParams {
            theta1: vec![1e6],
            ..params.clone()
        };
        assert!((ad_reward(st(1, 20), 1, &steep) - 5.0).abs() < 1e-12);

        let literal = AdArmParams {
            form: AdRewardForm::Literal,
            ..params
        };
        assert!((ad_reward(st(10, 20), 1, &literal) - 5.0 * (1.0 - 1f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn tabular_one_state_arm() {
        let spec = ArmSpec::Tabular(TabularArm::one_state(&[2.0]));
        spec.validate().unwrap();
        let s = spec.initial_state();
        assert_eq!(spec.num_states(), 1);
        assert_eq!(spec.mean_reward(s, 1).unwrap(), 2.0);
        assert_eq!(spec.mean_reward(s, 0).unwrap(), 0.0);
        assert_dist(&spec.kernel(s, 1).unwrap(), &[(1, 1.0)]);
    }

    #[test]
    fn invalid_distributions_rejected() {
        let s = st(1, 3);
        assert!(Distribution::from_masses([(s, 0.5)]).is_err());
        assert!(Distribution::from_masses([(s, 1.5), (st(2, 3), -0.5)]).is_err());
    }

    #[test]
    fn mean_reward_aoi_uses_next_state() {
        let spec = ArmSpec::Aoi(AoiArmParams {
            success: vec![0.7],
            cap: 20,
        });
        let s = spec.state(7).unwrap();
        assert!((spec.mean_reward(s, 1).unwrap() - (-(0.7 * 1.0 + 0.3 * 8.0))).abs() < 1e-12);
    }

    #[test]
    fn sample_step_deterministic_kernel() {
        let spec = ArmSpec::Aoi(AoiArmParams {
            success: vec![0.7],
            cap: 20,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (next, r) = sample_step(&spec, spec.state(5).unwrap(), 0, &mut rng).unwrap();
            assert_eq!(next.value(), 6);
            assert_eq!(r, -6.0);
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let spec = ArmSpec::Queue(QueueArmParams {
            arrival: 0.3,
            success: vec![0.6, 0.2],
            cap: 10,
        });
        let run = |seed| {
            let mut env = ArmEnv::new(spec.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..500).map(|t| env.step(t % 3, &mut rng).unwrap().2.value()).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn best_resource_ties_to_lower_id() {
        let ch = ChannelModel::new(vec![vec![0.7, 0.3], vec![0.3, 0.7], vec![0.5, 0.5]]).unwrap();
        assert_eq!(ch.best_resource(0), 1);
        assert_eq!(ch.best_resource(1), 2);
        assert_eq!(ch.best_resource(2), 1);
    }
}
