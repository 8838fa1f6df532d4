//! Capacity-constrained max-weight assignment of arms to resources.
//!
//! Resource `h` is expanded into `C_h` unit slots and the null resource into
//! one slot per arm, and the resulting rectangular problem is solved with the
//! shortest-augmenting-path Hungarian method. Null edges weigh zero.
//!
//! Among optima with equal total weight the solver returns the one whose
//! action vector is lexicographically smallest when the null resource is
//! ranked after every real resource: earlier arms get served first, and
//! lower resource ids win over higher ones.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::ActionId;
use crate::{Error, Result};

/// Edge weights `w[n][h-1]` between arm `n` and resource `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    rows: Vec<Vec<f64>>,
}

impl WeightMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || width == 0 {
            return Err(Error::InvalidConfig("weight matrix needs at least one arm and one resource".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != width) {
            return Err(Error::ShapeMismatch {
                expected: width,
                got: bad.len(),
            });
        }
        if rows.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig("weights must be finite".into()));
        }
        Ok(Self { rows })
    }

    pub fn num_arms(&self) -> usize {
        self.rows.len()
    }

    pub fn num_resources(&self) -> usize {
        self.rows[0].len()
    }

    /// Weight of giving arm `n` the action `a` (null weighs zero).
    pub fn weight(&self, n: usize, a: ActionId) -> f64 {
        if a == 0 {
            0.0
        } else {
            self.rows[n][a - 1]
        }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Replaces every weight below its resource price with a negative
    /// sentinel so the arm is never matched there.
    pub fn mask_below_prices(&self, prices: &[f64]) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|row| {
                row.iter()
                    .zip(prices)
                    .map(|(&w, &price)| if w < price { -1.0 } else { w })
                    .collect()
            })
            .collect();
        Self { rows }
    }
}

/// Per-resource capacities `C_h`; the null resource is uncapacitated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityVector(pub Vec<usize>);

impl CapacityVector {
    pub fn num_resources(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, h: ActionId) -> usize {
        self.0[h - 1]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

/// One action per arm.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment(pub Vec<ActionId>);

impl Assignment {
    pub fn idle(num_arms: usize) -> Self {
        Self(vec![0; num_arms])
    }

    pub fn actions(&self) -> &[ActionId] {
        &self.0
    }

    /// Number of arms on each real resource.
    pub fn loads(&self, num_resources: usize) -> Vec<usize> {
        let mut loads = vec![0; num_resources];
        for &a in &self.0 {
            if a >= 1 && a <= num_resources {
                loads[a - 1] += 1;
            }
        }
        loads
    }

    pub fn is_feasible(&self, caps: &CapacityVector) -> bool {
        self.0.iter().all(|&a| a <= caps.num_resources())
            && self
                .loads(caps.num_resources())
                .iter()
                .zip(&caps.0)
                .all(|(load, cap)| load <= cap)
    }

    pub fn total_weight(&self, weights: &WeightMatrix) -> f64 {
        self.0
            .iter()
            .enumerate()
            .map(|(n, &a)| weights.weight(n, a))
            .sum()
    }
}

fn check_shapes(weights: &WeightMatrix, caps: &CapacityVector) -> Result<()> {
    if weights.num_resources() != caps.num_resources() {
        return Err(Error::ShapeMismatch {
            expected: weights.num_resources(),
            got: caps.num_resources(),
        });
    }
    Ok(())
}

/// Tie-break rank of an action: real resources by id, null last.
fn rank(a: ActionId, num_resources: usize) -> i128 {
    if a == 0 {
        num_resources as i128 + 1
    } else {
        a as i128
    }
}

/// Positional weights turning the rank vector into one comparable integer;
/// `None` when it would overflow, in which case ties are left to the solver.
fn rank_place_values(num_arms: usize, num_resources: usize) -> Option<Vec<i128>> {
    let base = num_resources as i128 + 2;
    base.checked_pow(num_arms as u32)?;
    Some((0..num_arms).map(|n| base.pow((num_arms - 1 - n) as u32)).collect())
}

fn tolerance(weights: &WeightMatrix) -> f64 {
    let scale = weights.rows.iter().flatten().fold(1.0f64, |m, w| m.max(w.abs()));
    1e-9 * scale * weights.num_arms() as f64
}

/// Cost with a lexicographic tie-break component.
#[derive(Debug, Clone, Copy)]
struct LexCost {
    primary: f64,
    secondary: i128,
}

impl LexCost {
    const ZERO: Self = Self {
        primary: 0.0,
        secondary: 0,
    };
    const INF: Self = Self {
        primary: f64::INFINITY,
        secondary: 0,
    };

    fn add(self, o: Self) -> Self {
        Self {
            primary: self.primary + o.primary,
            secondary: self.secondary + o.secondary,
        }
    }

    fn sub(self, o: Self) -> Self {
        Self {
            primary: self.primary - o.primary,
            secondary: self.secondary - o.secondary,
        }
    }

    fn less(self, o: Self, eps: f64) -> bool {
        if self.primary.is_infinite() || o.primary.is_infinite() || (self.primary - o.primary).abs() > eps {
            self.primary < o.primary
        } else {
            self.secondary < o.secondary
        }
    }
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`). Returns the column of each row.
fn hungarian(cost: &[Vec<LexCost>], eps: f64) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    // 1-based potentials and matching, column 0 is the virtual root
    let mut u = vec![LexCost::ZERO; n + 1];
    let mut v = vec![LexCost::ZERO; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![LexCost::INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = LexCost::INF;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1].sub(u[i0]).sub(v[j]);
                if cur.less(minv[j], eps) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if j1 == 0 || minv[j].less(delta, eps) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] = u[row_of[j]].add(delta);
                    v[j] = v[j].sub(delta);
                } else {
                    minv[j] = minv[j].sub(delta);
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Exact max-weight assignment respecting `caps`, with the null resource
/// available to every arm at weight zero.
pub fn max_weight_assign(weights: &WeightMatrix, caps: &CapacityVector) -> Result<Assignment> {
    check_shapes(weights, caps)?;
    let num_arms = weights.num_arms();
    let num_resources = weights.num_resources();

    let mut slots: Vec<ActionId> = Vec::new();
    for h in 1..=num_resources {
        slots.extend(std::iter::repeat(h).take(caps.get(h).min(num_arms)));
    }
    slots.extend(std::iter::repeat(0).take(num_arms));

    let places = rank_place_values(num_arms, num_resources);
    let cost: Vec<Vec<LexCost>> = (0..num_arms)
        .map(|n| {
            slots
                .iter()
                .map(|&a| LexCost {
                    primary: -weights.weight(n, a),
                    secondary: places.as_ref().map_or(0, |p| rank(a, num_resources) * p[n]),
                })
                .collect()
        })
        .collect();

    let cols = hungarian(&cost, tolerance(weights));
    Ok(Assignment(cols.into_iter().map(|k| slots[k]).collect()))
}

/// Uniformly random feasible assignment: arms are visited in random order,
/// each draws an action from `{0..H}` uniformly, and draws on a full
/// resource fall back to idle.
pub fn random_feasible_assign<R: Rng + ?Sized>(num_arms: usize, caps: &CapacityVector, rng: &mut R) -> Assignment {
    let mut order: Vec<usize> = (0..num_arms).collect();
    order.shuffle(rng);
    let mut remaining = caps.0.clone();
    let mut actions = vec![0; num_arms];
    for n in order {
        let a = rng.gen_range(0..=caps.num_resources());
        if a > 0 && remaining[a - 1] > 0 {
            remaining[a - 1] -= 1;
            actions[n] = a;
        }
    }
    Assignment(actions)
}

/// Largest instance [`brute_force_assign`] accepts.
pub const BRUTE_FORCE_MAX_ARMS: usize = 8;

/// Exhaustive enumeration of all `(H+1)^N` action vectors, applying the
/// same tie-break as [`max_weight_assign`]. Intended as a test oracle.
pub fn brute_force_assign(weights: &WeightMatrix, caps: &CapacityVector) -> Result<Assignment> {
    check_shapes(weights, caps)?;
    let num_arms = weights.num_arms();
    if num_arms > BRUTE_FORCE_MAX_ARMS {
        return Err(Error::InstanceTooLarge(num_arms));
    }
    let num_actions = weights.num_resources() + 1;
    let eps = tolerance(weights);
    let key = |a: &[ActionId]| -> Vec<i128> { a.iter().map(|&x| rank(x, num_actions - 1)).collect() };

    let mut best: Option<(f64, Assignment)> = None;
    let mut current = vec![0; num_arms];
    loop {
        let candidate = Assignment(current.clone());
        if candidate.is_feasible(caps) {
            let total = candidate.total_weight(weights);
            let better = match &best {
                None => true,
                Some((best_total, best_a)) => {
                    total > best_total + eps
                        || ((total - best_total).abs() <= eps && key(&candidate.0) < key(&best_a.0))
                }
            };
            if better {
                best = Some((total, candidate));
            }
        }
        // odometer increment
        let mut i = 0;
        while i < num_arms {
            current[i] += 1;
            if current[i] < num_actions {
                break;
            }
            current[i] = 0;
            i += 1;
        }
        if i == num_arms {
            break;
        }
    }
    Ok(best.expect("the all-idle assignment is always feasible").1)
}
