//! No-U-Turn Hamiltonian sampler with a diagonal metric, dual-averaging
//! step-size adaptation and windowed metric adaptation during warm-up.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Energy error beyond which a trajectory is declared divergent.
const MAX_ENERGY_ERROR: f64 = 1000.0;

pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Log-density at `x`, writing its gradient into `grad`. Returns `-inf`
    /// outside the support (the gradient is then unspecified).
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct NutsSettings {
    pub warmup: usize,
    pub iterations: usize,
    pub target_accept: f64,
    pub max_depth: usize,
}

impl Default for NutsSettings {
    fn default() -> Self {
        Self { warmup: 1000, iterations: 1000, target_accept: 0.8, max_depth: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// Kept draws (warm-up excluded), unconstrained coordinates.
    pub draws: Vec<Vec<f64>>,
    pub mean_accept: f64,
    pub divergences: usize,
    pub step_size: f64,
    pub mean_tree_depth: f64,
}

#[derive(Debug, Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Tree {
    minus: Point,
    plus: Point,
    proposal: Point,
    n_valid: f64,
    keep_going: bool,
    sum_accept: f64,
    n_steps: usize,
    diverged: bool,
}

struct Hamiltonian<'a, D: LogDensity> {
    density: &'a D,
    inv_metric: Vec<f64>,
}

impl<D: LogDensity> Hamiltonian<'_, D> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(pi, m)| pi * pi * m).sum::<f64>()
    }

    fn joint(&self, pt: &Point) -> f64 {
        if pt.logp.is_finite() {
            pt.logp - self.kinetic(&pt.p)
        } else {
            f64::NEG_INFINITY
        }
    }

    fn leapfrog(&self, from: &Point, eps: f64) -> Point {
        let mut next = from.clone();
        for i in 0..next.q.len() {
            next.p[i] += 0.5 * eps * next.grad[i];
            next.q[i] += eps * self.inv_metric[i] * next.p[i];
        }
        next.logp = self.density.log_density_grad(&next.q, &mut next.grad);
        if next.logp.is_finite() {
            for i in 0..next.p.len() {
                next.p[i] += 0.5 * eps * next.grad[i];
            }
        }
        next
    }

    fn no_uturn(&self, minus: &Point, plus: &Point) -> bool {
        let mut a = 0.0;
        let mut b = 0.0;
        for i in 0..minus.q.len() {
            let dq = plus.q[i] - minus.q[i];
            a += dq * self.inv_metric[i] * minus.p[i];
            b += dq * self.inv_metric[i] * plus.p[i];
        }
        a >= 0.0 && b >= 0.0
    }

    fn sample_momentum(&self, rng: &mut ChaCha20Rng) -> Vec<f64> {
        self.inv_metric
            .iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                z / m.sqrt()
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &self,
        rng: &mut ChaCha20Rng,
        from: &Point,
        log_slice: f64,
        direction: f64,
        depth: usize,
        eps: f64,
        joint0: f64,
    ) -> Tree {
        if depth == 0 {
            let next = self.leapfrog(from, direction * eps);
            let joint = self.joint(&next);
            let diverged = !(log_slice < joint + MAX_ENERGY_ERROR);
            let accept = if joint.is_finite() { (joint - joint0).exp().min(1.0) } else { 0.0 };
            return Tree {
                minus: next.clone(),
                plus: next.clone(),
                n_valid: if log_slice <= joint { 1.0 } else { 0.0 },
                proposal: next,
                keep_going: !diverged,
                sum_accept: accept,
                n_steps: 1,
                diverged,
            };
        }

        let mut tree = self.build_tree(rng, from, log_slice, direction, depth - 1, eps, joint0);
        if !tree.keep_going {
            return tree;
        }
        let edge = if direction < 0.0 { &tree.minus } else { &tree.plus };
        let other = self.build_tree(rng, &edge.clone(), log_slice, direction, depth - 1, eps, joint0);
        if direction < 0.0 {
            tree.minus = other.minus;
        } else {
            tree.plus = other.plus;
        }
        let total = tree.n_valid + other.n_valid;
        if total > 0.0 && rng.random::<f64>() < other.n_valid / total {
            tree.proposal = other.proposal;
        }
        tree.n_valid = total;
        tree.sum_accept += other.sum_accept;
        tree.n_steps += other.n_steps;
        tree.diverged |= other.diverged;
        tree.keep_going = other.keep_going && self.no_uturn(&tree.minus, &tree.plus);
        tree
    }

    /// One NUTS transition; returns (new point, mean acceptance, depth, diverged).
    fn transition(
        &self,
        rng: &mut ChaCha20Rng,
        current: &Point,
        eps: f64,
        max_depth: usize,
    ) -> (Point, f64, usize, bool) {
        let mut start = current.clone();
        start.p = self.sample_momentum(rng);
        let joint0 = self.joint(&start);
        let log_slice = joint0 + rng.random::<f64>().ln();

        let mut minus = start.clone();
        let mut plus = start.clone();
        let mut chosen = start.clone();
        let mut n_valid = 1.0;
        let mut sum_accept = 0.0;
        let mut n_steps = 0usize;
        let mut diverged = false;
        let mut depth = 0;
        while depth < max_depth {
            let direction = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let tree = if direction < 0.0 {
                let t = self.build_tree(rng, &minus, log_slice, direction, depth, eps, joint0);
                minus = t.minus.clone();
                t
            } else {
                let t = self.build_tree(rng, &plus, log_slice, direction, depth, eps, joint0);
                plus = t.plus.clone();
                t
            };
            sum_accept += tree.sum_accept;
            n_steps += tree.n_steps;
            diverged |= tree.diverged;
            if tree.keep_going && rng.random::<f64>() < tree.n_valid / n_valid {
                chosen = tree.proposal;
            }
            n_valid += tree.n_valid;
            depth += 1;
            if !tree.keep_going || !self.no_uturn(&minus, &plus) {
                break;
            }
        }
        chosen.p.iter_mut().for_each(|v| *v = 0.0);
        let accept = if n_steps > 0 { sum_accept / n_steps as f64 } else { 0.0 };
        (chosen, accept, depth, diverged)
    }

    /// Heuristic initial step size: double or halve until the one-step
    /// acceptance probability crosses 1/2.
    fn initial_step_size(&self, rng: &mut ChaCha20Rng, at: &Point) -> f64 {
        let mut eps = 1.0;
        let mut start = at.clone();
        start.p = self.sample_momentum(rng);
        let joint0 = self.joint(&start);
        let log_ratio = |eps: f64| {
            let next = self.leapfrog(&start, eps);
            let j = self.joint(&next);
            if j.is_finite() {
                j - joint0
            } else {
                f64::NEG_INFINITY
            }
        };
        let up = log_ratio(eps) > (0.5f64).ln();
        for _ in 0..100 {
            let r = log_ratio(eps);
            if up && !(r > (0.5f64).ln()) {
                break;
            }
            if !up && r > (0.5f64).ln() {
                break;
            }
            eps = if up { eps * 2.0 } else { eps / 2.0 };
            if !(1e-10..=1e7).contains(&eps) {
                break;
            }
        }
        eps.clamp(1e-10, 1e7)
    }
}

struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    count: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, target: f64) -> Self {
        Self { mu: (10.0 * eps).ln(), h_bar: 0.0, log_eps: eps.ln(), log_eps_bar: 0.0, count: 0.0, target }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.count += 1.0;
        let m = self.count;
        let w = 1.0 / (m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        self.log_eps = self.mu - m.sqrt() / Self::GAMMA * self.h_bar;
        let decay = m.powf(-Self::KAPPA);
        self.log_eps_bar = decay * self.log_eps + (1.0 - decay) * self.log_eps_bar;
        self.log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Warm-up schedule: fast initial buffer, doubling slow windows for metric
/// estimation, fast terminal buffer.
fn window_ends(warmup: usize) -> Vec<usize> {
    let (init, term, base) = if warmup >= 150 {
        (75, 50, 25)
    } else {
        let init = (warmup as f64 * 0.15) as usize;
        let term = (warmup as f64 * 0.1) as usize;
        (init, term, warmup.saturating_sub(init + term))
    };
    if base == 0 || warmup < 20 {
        return Vec::new();
    }
    let slow_end = warmup - term;
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < slow_end {
        let mut end = start + size;
        if end + 2 * size > slow_end {
            end = slow_end;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    ends
}

#[derive(Default)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn push(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|m| {
                let var = m / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Runs one chain from `init`.
pub fn run_chain<D: LogDensity>(
    density: &D,
    init: &[f64],
    settings: NutsSettings,
    rng: &mut ChaCha20Rng,
) -> ChainOutput {
    let dim = density.dim();
    let mut ham = Hamiltonian { density, inv_metric: vec![1.0; dim] };
    let mut grad = vec![0.0; dim];
    let logp = density.log_density_grad(init, &mut grad);
    let mut current = Point { q: init.to_vec(), p: vec![0.0; dim], grad, logp };

    let mut eps = ham.initial_step_size(rng, &current);
    let mut adapt = DualAveraging::new(eps, settings.target_accept);
    let ends = window_ends(settings.warmup);
    let slow_start = if ends.is_empty() { usize::MAX } else if settings.warmup >= 150 { 75 } else { (settings.warmup as f64 * 0.15) as usize };
    let mut window = Welford::default();
    let mut next_end = 0;

    for it in 0..settings.warmup {
        let (next, accept, _, _) = ham.transition(rng, &current, eps, settings.max_depth);
        current = next;
        eps = adapt.update(accept);
        if it >= slow_start && next_end < ends.len() {
            window.push(&current.q);
            if it + 1 == ends[next_end] {
                ham.inv_metric = window.regularized_variance();
                window = Welford::default();
                next_end += 1;
                eps = ham.initial_step_size(rng, &current);
                adapt = DualAveraging::new(eps, settings.target_accept);
            }
        }
    }
    if settings.warmup > 0 {
        eps = adapt.final_step();
    }

    let mut draws = Vec::with_capacity(settings.iterations);
    let mut accept_sum = 0.0;
    let mut depth_sum = 0.0;
    let mut divergences = 0;
    for _ in 0..settings.iterations {
        let (next, accept, depth, diverged) = ham.transition(rng, &current, eps, settings.max_depth);
        current = next;
        accept_sum += accept;
        depth_sum += depth as f64;
        divergences += diverged as usize;
        draws.push(current.q.clone());
    }
    let n = settings.iterations.max(1) as f64;
    ChainOutput {
        draws,
        mean_accept: accept_sum / n,
        divergences,
        step_size: eps,
        mean_tree_depth: depth_sum / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    struct Gaussian {
        mean: Vec<f64>,
        sd: Vec<f64>,
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.mean.len()
        }

        fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for i in 0..x.len() {
                let z = (x[i] - self.mean[i]) / self.sd[i];
                lp -= 0.5 * z * z;
                grad[i] = -z / self.sd[i];
            }
            lp
        }
    }

    #[test]
    fn recovers_gaussian_moments() {
        let target = Gaussian { mean: vec![1.0, -3.0, 0.0], sd: vec![0.1, 2.0, 10.0] };
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let out = run_chain(
            &target,
            &[0.0, 0.0, 0.0],
            NutsSettings { warmup: 500, iterations: 2000, ..Default::default() },
            &mut rng,
        );
        for i in 0..3 {
            let xs: Vec<f64> = out.draws.iter().map(|d| d[i]).collect();
            let m = crate::stats::mean(&xs);
            let s = crate::stats::sample_sd(&xs);
            assert!((m - target.mean[i]).abs() < 0.15 * target.sd[i], "mean {i}: {m}");
            assert!((s / target.sd[i] - 1.0).abs() < 0.15, "sd {i}: {s}");
        }
        assert!(out.mean_accept > 0.6);
        assert_eq!(out.divergences, 0);
    }

    #[test]
    fn windows_cover_warmup() {
        let ends = window_ends(1000);
        assert_eq!(*ends.last().unwrap(), 950);
        assert_eq!(ends[0], 100);
        assert!(window_ends(10).is_empty());
    }
}
