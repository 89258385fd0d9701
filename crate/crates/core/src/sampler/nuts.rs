//! One NUTS transition with a diagonal Euclidean metric: multinomial
//! sampling over a doubling trajectory, generalized U-turn check including
//! the cross-subtree checks, and biased progressive sampling at the top
//! level.

use rand::Rng;
use rand_distr::StandardNormal;

use super::LogDensity;

/// Energy error beyond which a trajectory is declared divergent.
pub const MAX_ENERGY_ERROR: f64 = 1000.0;

/// Position with its cached log density and gradient.
#[derive(Debug, Clone)]
pub struct Point {
    pub q: Vec<f64>,
    pub logp: f64,
    pub grad: Vec<f64>,
}

impl Point {
    pub fn new<T: LogDensity + ?Sized>(target: &T, q: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let logp = target.logp_grad(&q, &mut grad);
        Self { q, logp, grad }
    }

    pub fn is_finite(&self) -> bool {
        self.logp.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionStats {
    pub energy: f64,
    pub accept_prob: f64,
    pub tree_depth: u32,
    pub divergent: bool,
    pub n_leapfrog: u32,
}

/// Integrator state: a point plus momentum.
#[derive(Clone)]
struct Phase {
    point: Point,
    p: Vec<f64>,
}

struct Ctx<'a, T: ?Sized, R> {
    target: &'a T,
    inv_mass: &'a [f64],
    step: f64,
    h0: f64,
    rng: &'a mut R,
    n_leapfrog: u32,
    sum_metro: f64,
    divergent: bool,
}

fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
}

fn hamiltonian(z: &Phase, inv_mass: &[f64]) -> f64 {
    let h = -z.point.logp + kinetic(&z.p, inv_mass);
    if h.is_nan() {
        f64::INFINITY
    } else {
        h
    }
}

fn p_sharp(p: &[f64], inv_mass: &[f64]) -> Vec<f64> {
    p.iter().zip(inv_mass).map(|(p, m)| p * m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn no_u_turn(sharp_minus: &[f64], sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(sharp_plus, rho) > 0.0 && dot(sharp_minus, rho) > 0.0
}

fn leapfrog<T: LogDensity + ?Sized>(target: &T, z: &mut Phase, inv_mass: &[f64], eps: f64) {
    let half = 0.5 * eps;
    for (p, g) in z.p.iter_mut().zip(&z.point.grad) {
        *p += half * g;
    }
    for ((q, p), m) in z.point.q.iter_mut().zip(&z.p).zip(inv_mass) {
        *q += eps * m * p;
    }
    z.point.logp = target.logp_grad(&z.point.q, &mut z.point.grad);
    for (p, g) in z.p.iter_mut().zip(&z.point.grad) {
        *p += half * g;
    }
}

pub fn sample_momentum<R: Rng>(rng: &mut R, inv_mass: &[f64]) -> Vec<f64> {
    inv_mass
        .iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            z / m.sqrt()
        })
        .collect()
}

/// Subtree boundary momenta, written by `build_tree`.
struct Edge {
    p_beg: Vec<f64>,
    sharp_beg: Vec<f64>,
    p_end: Vec<f64>,
    sharp_end: Vec<f64>,
}

/// Recursively extends the trajectory from `z` by `2^depth` leapfrog steps.
/// Returns false when the subtree diverged or made a U-turn.
#[allow(clippy::too_many_arguments)]
fn build_tree<T: LogDensity + ?Sized, R: Rng>(
    ctx: &mut Ctx<'_, T, R>,
    depth: u32,
    z: &mut Phase,
    propose: &mut Phase,
    edge: &mut Edge,
    rho: &mut [f64],
    log_sum_weight: &mut f64,
    sign: f64,
) -> bool {
    if depth == 0 {
        leapfrog(ctx.target, z, ctx.inv_mass, sign * ctx.step);
        ctx.n_leapfrog += 1;
        let mut h = hamiltonian(z, ctx.inv_mass);
        if !z.point.is_finite() {
            h = f64::INFINITY;
        }
        if h - ctx.h0 > MAX_ENERGY_ERROR {
            ctx.divergent = true;
        }
        let w = ctx.h0 - h;
        *log_sum_weight = log_sum_exp(*log_sum_weight, w);
        ctx.sum_metro += if w > 0.0 { 1.0 } else { w.exp() };
        propose.clone_from(z);
        let sharp = p_sharp(&z.p, ctx.inv_mass);
        edge.sharp_beg.clone_from(&sharp);
        edge.sharp_end = sharp;
        for (r, p) in rho.iter_mut().zip(&z.p) {
            *r += p;
        }
        edge.p_beg.clone_from(&z.p);
        edge.p_end.clone_from(&z.p);
        return !ctx.divergent;
    }

    let dim = z.p.len();
    let zeros = || vec![0.0; dim];

    // first half
    let mut init = Edge {
        p_beg: zeros(),
        sharp_beg: zeros(),
        p_end: zeros(),
        sharp_end: zeros(),
    };
    let mut rho_init = zeros();
    let mut lsw_init = f64::NEG_INFINITY;
    if !build_tree(ctx, depth - 1, z, propose, &mut init, &mut rho_init, &mut lsw_init, sign) {
        return false;
    }

    // second half
    let mut propose_final = z.clone();
    let mut fin = Edge {
        p_beg: zeros(),
        sharp_beg: zeros(),
        p_end: zeros(),
        sharp_end: zeros(),
    };
    let mut rho_final = zeros();
    let mut lsw_final = f64::NEG_INFINITY;
    if !build_tree(
        ctx,
        depth - 1,
        z,
        &mut propose_final,
        &mut fin,
        &mut rho_final,
        &mut lsw_final,
        sign,
    ) {
        return false;
    }

    let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
    *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
    if lsw_final > lsw_subtree || ctx.rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
        std::mem::swap(propose, &mut propose_final);
    }

    let rho_subtree = add(&rho_init, &rho_final);
    for (r, s) in rho.iter_mut().zip(&rho_subtree) {
        *r += s;
    }
    let mut persist = no_u_turn(&init.sharp_beg, &fin.sharp_end, &rho_subtree);
    persist &= no_u_turn(&init.sharp_beg, &fin.sharp_beg, &add(&rho_init, &fin.p_beg));
    persist &= no_u_turn(&init.sharp_end, &fin.sharp_end, &add(&rho_final, &init.p_end));

    edge.p_beg = init.p_beg;
    edge.sharp_beg = init.sharp_beg;
    edge.p_end = fin.p_end;
    edge.sharp_end = fin.sharp_end;
    persist
}

/// Runs one transition from `current`, returning the new point and stats.
pub fn transition<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    current: &Point,
    inv_mass: &[f64],
    step: f64,
    max_depth: u32,
    rng: &mut R,
) -> (Point, TransitionStats) {
    let p0 = sample_momentum(rng, inv_mass);
    let z0 = Phase {
        point: current.clone(),
        p: p0,
    };
    let h0 = hamiltonian(&z0, inv_mass);
    let sharp0 = p_sharp(&z0.p, inv_mass);

    let mut ctx = Ctx {
        target,
        inv_mass,
        step,
        h0,
        rng,
        n_leapfrog: 0,
        sum_metro: 0.0,
        divergent: false,
    };

    let mut z_fwd = z0.clone();
    let mut z_bck = z0.clone();
    let mut sample = z0.clone();
    let mut propose = z0.clone();

    // outer-edge momenta on each side
    let mut fwd = Edge {
        p_beg: z0.p.clone(),
        sharp_beg: sharp0.clone(),
        p_end: z0.p.clone(),
        sharp_end: sharp0.clone(),
    };
    let mut bck = Edge {
        p_beg: z0.p.clone(),
        sharp_beg: sharp0.clone(),
        p_end: z0.p.clone(),
        sharp_end: sharp0,
    };
    let mut rho = z0.p.clone();
    let mut log_sum_weight = 0.0;
    let mut depth = 0;
    let dim = rho.len();

    while depth < max_depth {
        let mut rho_fwd = vec![0.0; dim];
        let mut rho_bck = vec![0.0; dim];
        let mut lsw_subtree = f64::NEG_INFINITY;
        let valid = if ctx.rng.random::<f64>() > 0.5 {
            // the backward side now spans everything built so far; its
            // inner edge is the old forward extreme
            rho_bck.clone_from(&rho);
            bck.p_beg.clone_from(&fwd.p_end);
            bck.sharp_beg.clone_from(&fwd.sharp_end);
            let mut sub = Edge {
                p_beg: vec![0.0; dim],
                sharp_beg: vec![0.0; dim],
                p_end: vec![0.0; dim],
                sharp_end: vec![0.0; dim],
            };
            let ok = build_tree(
                &mut ctx,
                depth,
                &mut z_fwd,
                &mut propose,
                &mut sub,
                &mut rho_fwd,
                &mut lsw_subtree,
                1.0,
            );
            fwd.p_beg = sub.p_beg;
            fwd.sharp_beg = sub.sharp_beg;
            fwd.p_end = sub.p_end;
            fwd.sharp_end = sub.sharp_end;
            ok
        } else {
            rho_fwd.clone_from(&rho);
            fwd.p_beg.clone_from(&bck.p_end);
            fwd.sharp_beg.clone_from(&bck.sharp_end);
            let mut sub = Edge {
                p_beg: vec![0.0; dim],
                sharp_beg: vec![0.0; dim],
                p_end: vec![0.0; dim],
                sharp_end: vec![0.0; dim],
            };
            let ok = build_tree(
                &mut ctx,
                depth,
                &mut z_bck,
                &mut propose,
                &mut sub,
                &mut rho_bck,
                &mut lsw_subtree,
                -1.0,
            );
            bck.p_beg = sub.p_beg;
            bck.sharp_beg = sub.sharp_beg;
            bck.p_end = sub.p_end;
            bck.sharp_end = sub.sharp_end;
            ok
        };

        if !valid {
            break;
        }
        depth += 1;

        if lsw_subtree > log_sum_weight
            || ctx.rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp()
        {
            sample.clone_from(&propose);
        }
        log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

        rho = add(&rho_bck, &rho_fwd);
        // bck.end / fwd.end are the extreme edges; *.beg the inner edges
        let mut persist = no_u_turn(&bck.sharp_end, &fwd.sharp_end, &rho);
        persist &= no_u_turn(&bck.sharp_end, &fwd.sharp_beg, &add(&rho_bck, &fwd.p_beg));
        persist &= no_u_turn(&bck.sharp_beg, &fwd.sharp_end, &add(&rho_fwd, &bck.p_beg));
        if !persist {
            break;
        }
    }

    let n_leapfrog = ctx.n_leapfrog;
    let stats = TransitionStats {
        energy: hamiltonian(&sample, inv_mass),
        accept_prob: if n_leapfrog > 0 {
            ctx.sum_metro / n_leapfrog as f64
        } else {
            0.0
        },
        tree_depth: depth,
        divergent: ctx.divergent,
        n_leapfrog,
    };
    (sample.point, stats)
}

/// Heuristic initial step size: doubles or halves until a single leapfrog
/// step's acceptance crosses 0.8.
pub fn find_reasonable_step<T: LogDensity + ?Sized, R: Rng>(
    target: &T,
    start: &Point,
    inv_mass: &[f64],
    mut step: f64,
    rng: &mut R,
) -> f64 {
    let log_target = 0.8f64.ln();
    let trial = |step: f64, rng: &mut R| {
        let z0 = Phase {
            point: start.clone(),
            p: sample_momentum(rng, inv_mass),
        };
        let h0 = hamiltonian(&z0, inv_mass);
        let mut z = z0;
        leapfrog(target, &mut z, inv_mass, step);
        let h = if z.point.is_finite() {
            hamiltonian(&z, inv_mass)
        } else {
            f64::INFINITY
        };
        h0 - h
    };
    let up = trial(step, rng) > log_target;
    for _ in 0..100 {
        let dh = trial(step, rng);
        if up && !(dh > log_target) || !up && !(dh < log_target) {
            break;
        }
        step = if up { step * 2.0 } else { step * 0.5 };
        if !(1e-12..=1e7).contains(&step) {
            break;
        }
    }
    step.clamp(1e-12, 1e7)
}
