//! Reference policies and the common policy handle.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{DipAgent, DipConfig};
use crate::env::{ActionId, ArmSpec, ArmState, ChannelModel, QueueArmParams};
use crate::matching::{max_weight_assign, random_feasible_assign, Assignment, CapacityVector, WeightMatrix};
use crate::oracle::{ArmMdp, IndexTable, LambdaVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Dip,
    Swim,
    Whittle,
    DeepTop,
    Random,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Dip,
        PolicyKind::Swim,
        PolicyKind::Whittle,
        PolicyKind::DeepTop,
        PolicyKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Dip => "dip",
            PolicyKind::Swim => "swim",
            PolicyKind::Whittle => "whittle",
            PolicyKind::DeepTop => "deeptop",
            PolicyKind::Random => "random",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "deep_top" && *k == PolicyKind::DeepTop))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown policy `{s}`")))
    }
}

/// Index of the Whittle policy for a queue with arrival `zeta` served at
/// success probability `p`: `(3ζ - p)/(p - ζ) + 2ps`.
pub fn whittle_closed_form(zeta: f64, p: f64, s: f64) -> Result<f64> {
    if p == zeta {
        return Err(Error::InvalidConfig(format!(
            "Whittle index undefined for p = zeta = {p}"
        )));
    }
    Ok((3.0 * zeta - p) / (p - zeta) + 2.0 * p * s)
}

/// Uniform capacity-feasible assignment.
pub fn random_act<R: Rng + ?Sized>(num_arms: usize, caps: &CapacityVector, rng: &mut R) -> Assignment {
    random_feasible_assign(num_arms, caps, rng)
}

/// Oracle partial indexes with max-weight matching and the price controller.
#[derive(Debug, Clone)]
pub struct SwimPolicy {
    /// Distinct arm models and the model of every arm.
    mdps: Vec<ArmMdp>,
    arm_model: Vec<usize>,
    caps: CapacityVector,
    bound: f64,
    step_size: f64,
    update_period: usize,
    prices: LambdaVector,
    tables: Vec<IndexTable>,
    tick: u64,
}

impl SwimPolicy {
    pub fn new(specs: &[ArmSpec], caps: CapacityVector, config: &DipConfig) -> Result<Self> {
        let mut distinct: Vec<&ArmSpec> = Vec::new();
        let mut arm_model = Vec::with_capacity(specs.len());
        for spec in specs {
            let idx = match distinct.iter().position(|d| *d == spec) {
                Some(i) => i,
                None => {
                    distinct.push(spec);
                    distinct.len() - 1
                }
            };
            arm_model.push(idx);
        }
        let mdps = distinct
            .iter()
            .map(|s| ArmMdp::from_arm(s, config.discount))
            .collect::<Result<Vec<_>>>()?;
        let prices = LambdaVector::zeros(caps.num_resources(), config.price_bound);
        let mut policy = Self {
            mdps,
            arm_model,
            caps,
            bound: config.price_bound,
            step_size: config.price_step,
            update_period: config.price_update_period,
            prices,
            tables: Vec::new(),
            tick: 0,
        };
        policy.refresh_tables()?;
        Ok(policy)
    }

    fn refresh_tables(&mut self) -> Result<()> {
        self.tables = self
            .mdps
            .iter()
            .map(|m| IndexTable::compute(m, &self.prices, self.bound))
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    pub fn prices(&self) -> &LambdaVector {
        &self.prices
    }

    /// Fixes the prices and recomputes the oracle tables.
    pub fn set_prices(&mut self, prices: LambdaVector) -> Result<()> {
        self.prices = prices;
        self.refresh_tables()
    }

    pub fn table(&self, n: usize) -> &IndexTable {
        &self.tables[self.arm_model[n]]
    }

    pub fn index_matrix(&self, states: &[ArmState]) -> Result<WeightMatrix> {
        WeightMatrix::new(
            states
                .iter()
                .enumerate()
                .map(|(n, s)| self.table(n).rows()[s.value() - self.table(n).floor()].clone())
                .collect(),
        )
    }

    pub fn act(&self, states: &[ArmState]) -> Result<Assignment> {
        max_weight_assign(&self.index_matrix(states)?, &self.caps)
    }

    /// Number of arms whose oracle index exceeds each price.
    pub fn eligible_counts(&self, states: &[ArmState]) -> Result<Vec<usize>> {
        let weights = self.index_matrix(states)?;
        let prices = self.prices.values();
        Ok((0..self.caps.num_resources())
            .map(|h| weights.rows().iter().filter(|row| row[h] > prices[h]).count())
            .collect())
    }

    /// Price update on schedule from the states acted on this tick.
    pub fn observe(&mut self, states: &[ArmState]) -> Result<()> {
        if self.tick % self.update_period as u64 == 0 {
            let counts = self.eligible_counts(states)?;
            let next = crate::oracle::lambda_gradient_update(&self.prices, &counts, &self.caps, self.step_size);
            if next != self.prices {
                self.set_prices(next)?;
            }
        }
        self.tick += 1;
        Ok(())
    }
}

/// Closed-form Whittle scheduling with every user pooled on its most
/// reliable channel.
#[derive(Debug, Clone)]
pub struct WhittlePolicy {
    params: Vec<QueueArmParams>,
    channel: Vec<ActionId>,
    caps: CapacityVector,
}

impl WhittlePolicy {
    pub fn new(specs: &[ArmSpec], caps: CapacityVector) -> Result<Self> {
        let params = specs
            .iter()
            .map(|s| match s {
                ArmSpec::Queue(p) => Ok(p.clone()),
                _ => Err(Error::InvalidConfig("the Whittle policy needs queue arms".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        let model = ChannelModel::new(params.iter().map(|p| p.success.clone()).collect())?;
        let channel: Vec<ActionId> = (0..params.len()).map(|n| model.best_resource(n)).collect();
        for (p, &h) in params.iter().zip(&channel) {
            whittle_closed_form(p.arrival, p.success[h - 1], 0.0)?;
        }
        Ok(Self { params, channel, caps })
    }

    pub fn channel(&self, n: usize) -> ActionId {
        self.channel[n]
    }

    pub fn index(&self, n: usize, s: ArmState) -> f64 {
        let p = &self.params[n];
        let h = self.channel[n];
        whittle_closed_form(p.arrival, p.success[h - 1], s.value() as f64).expect("checked at construction")
    }

    /// Top-`C_h` users of each channel pool by index, regardless of sign;
    /// ties go to the lower arm id.
    pub fn act(&self, states: &[ArmState]) -> Assignment {
        let mut actions = vec![0; states.len()];
        for h in 1..=self.caps.num_resources() {
            let mut pool: Vec<(usize, f64)> = (0..states.len())
                .filter(|&n| self.channel[n] == h)
                .map(|n| (n, self.index(n, states[n])))
                .collect();
            pool.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for &(n, _) in pool.iter().take(self.caps.get(h)) {
                actions[n] = h;
            }
        }
        Assignment(actions)
    }
}

/// Activates the `k` arms with the highest indexes (ties to the lower arm
/// id) and shuffles them into the resource slots.
pub fn deeptop_act<R: Rng + ?Sized>(indexes: &[f64], caps: &CapacityVector, rng: &mut R) -> Assignment {
    let mut order: Vec<usize> = (0..indexes.len()).collect();
    order.sort_by(|&a, &b| indexes[b].total_cmp(&indexes[a]).then(a.cmp(&b)));
    let mut slots: Vec<ActionId> = (1..=caps.num_resources())
        .flat_map(|h| std::iter::repeat(h).take(caps.get(h)))
        .collect();
    slots.shuffle(rng);
    let mut actions = vec![0; indexes.len()];
    for (&n, &h) in order.iter().zip(&slots) {
        actions[n] = h;
    }
    Assignment(actions)
}

/// Single-index learner: the DIP machinery with one pooled resource of
/// capacity `ΣC_h`, acting through [`deeptop_act`].
#[derive(Debug, Clone)]
pub struct DeepTopPolicy {
    agent: DipAgent,
    caps: CapacityVector,
}

impl DeepTopPolicy {
    pub fn new(config: DipConfig, caps: CapacityVector, num_arms: usize, seed: u64) -> Result<Self> {
        let pooled = CapacityVector(vec![caps.total()]);
        Ok(Self {
            agent: DipAgent::new(config, pooled, num_arms, seed)?,
            caps,
        })
    }

    pub fn agent(&self) -> &DipAgent {
        &self.agent
    }

    pub fn agent_mut(&mut self) -> &mut DipAgent {
        &mut self.agent
    }

    pub fn indexes(&self, states: &[ArmState]) -> Vec<f64> {
        let prices = self.agent.prices().values();
        states
            .iter()
            .enumerate()
            .map(|(n, &s)| self.agent.predict_index(n, 1, s, prices))
            .collect()
    }

    pub fn act<R: Rng + ?Sized>(&self, states: &[ArmState], rng: &mut R) -> Assignment {
        if rng.gen::<f64>() < self.agent.config().epsilon {
            random_feasible_assign(states.len(), &self.caps, rng)
        } else {
            deeptop_act(&self.indexes(states), &self.caps, rng)
        }
    }

    /// Trains on the transitions with every served action collapsed to 1.
    pub fn observe(&mut self, transitions: &[(ArmState, ActionId, f64, ArmState)]) -> Result<()> {
        let collapsed: Vec<_> = transitions
            .iter()
            .map(|&(s, a, r, next)| (s, a.min(1), r, next))
            .collect();
        self.agent.observe(&collapsed).map(|_| ())
    }
}

/// One policy of any kind with its state.
#[derive(Debug, Clone)]
pub enum PolicyHandle {
    Dip(Box<DipAgent>),
    Swim(SwimPolicy),
    Whittle(WhittlePolicy),
    DeepTop(Box<DeepTopPolicy>),
    Random(CapacityVector),
}

impl PolicyHandle {
    pub fn new(kind: PolicyKind, specs: &[ArmSpec], caps: CapacityVector, config: &DipConfig, seed: u64) -> Result<Self> {
        Ok(match kind {
            PolicyKind::Dip => PolicyHandle::Dip(Box::new(DipAgent::new(config.clone(), caps, specs.len(), seed)?)),
            PolicyKind::Swim => PolicyHandle::Swim(SwimPolicy::new(specs, caps, config)?),
            PolicyKind::Whittle => PolicyHandle::Whittle(WhittlePolicy::new(specs, caps)?),
            PolicyKind::DeepTop => {
                PolicyHandle::DeepTop(Box::new(DeepTopPolicy::new(config.clone(), caps, specs.len(), seed)?))
            }
            PolicyKind::Random => PolicyHandle::Random(caps),
        })
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicyHandle::Dip(_) => PolicyKind::Dip,
            PolicyHandle::Swim(_) => PolicyKind::Swim,
            PolicyHandle::Whittle(_) => PolicyKind::Whittle,
            PolicyHandle::DeepTop(_) => PolicyKind::DeepTop,
            PolicyHandle::Random(_) => PolicyKind::Random,
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, states: &[ArmState], rng: &mut R) -> Result<Assignment> {
        match self {
            PolicyHandle::Dip(agent) => agent.act(states, rng).map(|(a, _)| a),
            PolicyHandle::Swim(p) => p.act(states),
            PolicyHandle::Whittle(p) => Ok(p.act(states)),
            PolicyHandle::DeepTop(p) => Ok(p.act(states, rng)),
            PolicyHandle::Random(caps) => Ok(random_act(states.len(), caps, rng)),
        }
    }

    /// Feeds back one tick of `(state, action, reward, next_state)`.
    pub fn observe(&mut self, transitions: &[(ArmState, ActionId, f64, ArmState)]) -> Result<()> {
        match self {
            PolicyHandle::Dip(agent) => agent.observe(transitions).map(|_| ()),
            PolicyHandle::Swim(p) => {
                let states: Vec<ArmState> = transitions.iter().map(|t| t.0).collect();
                p.observe(&states)
            }
            PolicyHandle::DeepTop(p) => p.observe(transitions),
            PolicyHandle::Whittle(_) | PolicyHandle::Random(_) => Ok(()),
        }
    }

    /// Current price of each of `num_resources` resources. Unpriced
    /// policies report zeros; DeepTOP reports its pooled price everywhere.
    pub fn prices(&self, num_resources: usize) -> Vec<f64> {
        match self {
            PolicyHandle::Dip(agent) => agent.prices().values().to_vec(),
            PolicyHandle::Swim(p) => p.prices().values().to_vec(),
            PolicyHandle::DeepTop(p) => vec![p.agent().prices().values()[0]; num_resources],
            PolicyHandle::Whittle(_) | PolicyHandle::Random(_) => vec![0.0; num_resources],
        }
    }
}
