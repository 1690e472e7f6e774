//! Wasserstein distances between discrete measures.
//!
//! Exact distances in one dimension come from the quantile coupling. Small
//! instances in any dimension are solved exactly as transport linear programs
//! with a primal network simplex, which also handles the sparse lattice
//! graphs used to compare particle clouds with gridded densities under the
//! `|x − y| + |u − v|` metric.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("empty input")]
    Empty,
    #[error("weights must be positive and sum to 1 (sum = {sum}, min = {min})")]
    BadWeights { sum: f64, min: f64 },
    #[error("order must be 1 or 2, got {0}")]
    BadOrder(u32),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{atoms} atoms exceed the exact solver budget of {budget}")]
    Budget { atoms: usize, budget: usize },
    #[error("paired measures have {left} and {right} atoms")]
    Mismatch { left: usize, right: usize },
    #[error("network simplex did not reach a feasible optimum: {0}")]
    Solver(String),
}

/// Largest atom count per side for exact dense transport.
pub const EXACT_BUDGET: usize = 512;

/// Finite measure with positive weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub dim: usize,
    /// Row-major `n × dim`.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self, TransportError> {
        if weights.is_empty() {
            return Err(TransportError::Empty);
        }
        if dim == 0 || points.len() != dim * weights.len() {
            return Err(TransportError::Dimension(format!(
                "{} coordinates for {} atoms of dim {dim}",
                points.len(),
                weights.len()
            )));
        }
        let sum: f64 = weights.iter().sum();
        let min = weights.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(TransportError::BadWeights { sum, min });
        }
        Ok(Self { dim, points, weights })
    }

    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self, TransportError> {
        let n = if dim == 0 { 0 } else { points.len() / dim };
        Self::new(dim, points, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn atom(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// Ground metric between atoms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GroundMetric {
    Euclidean,
    /// `|x − y| + |u − v|` where `x` is the first `dim_x` coordinates.
    Product {
        dim_x: usize,
    },
}

impl GroundMetric {
    #[inline]
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let norm = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(s, t)| (s - t) * (s - t)).sum::<f64>().sqrt();
        match *self {
            GroundMetric::Euclidean => norm(a, b),
            GroundMetric::Product { dim_x } => norm(&a[..dim_x], &b[..dim_x]) + norm(&a[dim_x..], &b[dim_x..]),
        }
    }
}

fn check_order(m: u32) -> Result<(), TransportError> {
    if m == 1 || m == 2 {
        Ok(())
    } else {
        Err(TransportError::BadOrder(m))
    }
}

/// `W_m` between two uniform samples on the line.
pub fn w_sorted_1d(a: &[f64], b: &[f64], m: u32) -> Result<f64, TransportError> {
    check_order(m)?;
    if a.is_empty() || b.is_empty() {
        return Err(TransportError::Empty);
    }
    if a.len() != b.len() {
        let wa = vec![1.0 / a.len() as f64; a.len()];
        let wb = vec![1.0 / b.len() as f64; b.len()];
        return w_weighted_1d(a, &wa, b, &wb, m);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let n = a.len() as f64;
    let s: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs().powi(m as i32)).sum();
    Ok(if m == 1 { s / n } else { (s / n).sqrt() })
}

/// `W_m` between weighted atoms on the line via the common refinement of
/// both quantile functions (exact for piecewise-constant quantiles).
pub fn w_weighted_1d(xa: &[f64], wa: &[f64], xb: &[f64], wb: &[f64], m: u32) -> Result<f64, TransportError> {
    check_order(m)?;
    if xa.is_empty() || xb.is_empty() {
        return Err(TransportError::Empty);
    }
    if xa.len() != wa.len() || xb.len() != wb.len() {
        return Err(TransportError::Dimension("weights and atoms differ in length".into()));
    }
    let sorted = |x: &[f64], w: &[f64]| -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = x.iter().cloned().zip(w.iter().cloned()).filter(|&(_, w)| w > 0.0).collect();
        v.sort_by(|p, q| p.0.total_cmp(&q.0));
        v
    };
    let a = sorted(xa, wa);
    let b = sorted(xb, wb);
    let ta: f64 = a.iter().map(|p| p.1).sum();
    let tb: f64 = b.iter().map(|p| p.1).sum();
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1 / ta, b[0].1 / tb);
    let mut acc = 0.0;
    loop {
        let step = ra.min(rb);
        acc += step * (a[i].0 - b[j].0).abs().powi(m as i32);
        ra -= step;
        rb -= step;
        let adv_a = ra <= 1e-15;
        let adv_b = rb <= 1e-15;
        if adv_a {
            i += 1;
            if i == a.len() {
                break;
            }
            ra += a[i].1 / ta;
        }
        if adv_b {
            j += 1;
            if j == b.len() {
                break;
            }
            rb += b[j].1 / tb;
        }
    }
    Ok(if m == 1 { acc } else { acc.sqrt() })
}

// ---------------------------------------------------------------------------
// Network simplex
// ---------------------------------------------------------------------------

/// Uncapacitated min-cost flow instance with node supplies summing to zero.
#[derive(Clone, Debug, Default)]
pub struct FlowProblem {
    pub supply: Vec<f64>,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub cost: Vec<f64>,
    /// Upper flow bound per arc; `f64::INFINITY` when uncapacitated.
    pub capacity: Vec<f64>,
}

impl FlowProblem {
    pub fn with_nodes(n: usize) -> Self {
        Self { supply: vec![0.0; n], ..Default::default() }
    }

    pub fn add_arc(&mut self, from: usize, to: usize, cost: f64) -> usize {
        self.add_bounded_arc(from, to, cost, f64::INFINITY)
    }

    pub fn add_bounded_arc(&mut self, from: usize, to: usize, cost: f64, capacity: f64) -> usize {
        self.source.push(from);
        self.target.push(to);
        self.cost.push(cost);
        self.capacity.push(capacity);
        self.source.len() - 1
    }

    pub fn node_count(&self) -> usize {
        self.supply.len()
    }

    pub fn arc_count(&self) -> usize {
        self.cost.len()
    }
}

/// Optimal flow of a [`FlowProblem`].
#[derive(Clone, Debug)]
pub struct FlowSolution {
    pub flow: Vec<f64>,
    pub cost: f64,
    pub pivots: usize,
}

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct TreeNode {
    pot: f64,
    parent: u32,
    /// Tree arc joining the node to its parent.
    pred: u32,
    first_child: u32,
    next_sib: u32,
    prev_sib: u32,
    size: u32,
}

#[derive(Clone, Copy)]
struct ArcState {
    cost: f64,
    flow: f64,
    cap: f64,
    src: u32,
    tgt: u32,
}

// Arc states; a nontree arc violates optimality when `state · reduced < 0`.
const TREE: i8 = 0;
const LOWER: i8 = 1;
const UPPER: i8 = -1;

/// Spanning-tree basis hung from an artificial root.
struct Simplex {
    n: usize,
    m: usize,
    root: usize,
    // Arcs `0..m` are real; `m + v` is the artificial arc of node `v`.
    arcs: Vec<ArcState>,
    state: Vec<i8>,
    nodes: Vec<TreeNode>,
    mark: Vec<u32>,
    stamp: u32,
    path: Vec<u32>,
    old_pred: Vec<u32>,
    next_arc: usize,
    block: usize,
    eps: f64,
    scale: f64,
}

impl Simplex {
    fn new(prob: &FlowProblem, tree: Option<&[(usize, usize)]>) -> Result<Self, TransportError> {
        let n = prob.node_count();
        let m = prob.arc_count();
        if n + m >= NONE as usize / 2 {
            return Err(TransportError::Dimension("flow problem too large".into()));
        }
        let root = n;
        let max_cost = prob.cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        let art = (max_cost + 1.0) * (n as f64 + 1.0);
        if prob.capacity.len() != m || prob.capacity.iter().any(|c| !(*c >= 0.0)) {
            return Err(TransportError::Dimension("every arc needs a nonnegative capacity".into()));
        }
        let mut arcs: Vec<ArcState> = (0..m)
            .map(|e| ArcState {
                cost: prob.cost[e],
                flow: 0.0,
                cap: prob.capacity[e],
                src: prob.source[e] as u32,
                tgt: prob.target[e] as u32,
            })
            .collect();
        for v in 0..n {
            let (src, tgt) = if prob.supply[v] >= 0.0 { (v, root) } else { (root, v) };
            arcs.push(ArcState { cost: art, flow: 0.0, cap: f64::INFINITY, src: src as u32, tgt: tgt as u32 });
        }
        let blank =
            TreeNode { pot: 0.0, parent: NONE, pred: NONE, first_child: NONE, next_sib: NONE, prev_sib: NONE, size: 1 };
        let mut sx = Self {
            n,
            m,
            root,
            arcs,
            state: vec![LOWER; m + n],
            nodes: vec![blank; n + 1],
            mark: vec![0; n + 1],
            stamp: 0,
            path: Vec::new(),
            old_pred: Vec::new(),
            next_arc: 0,
            block: (((m + n) as f64).sqrt() as usize).max(10),
            eps: 1e-12 * (max_cost + 1.0),
            scale: prob.supply.iter().map(|s| s.abs()).sum::<f64>().max(1e-300),
        };
        match tree {
            None => {
                for v in 0..n {
                    sx.hang(v, root, m + v, prob.supply[v].abs());
                }
            }
            Some(pairs) => sx.hang_tree(prob, pairs)?,
        }
        sx.compute_sizes();
        Ok(sx)
    }

    /// Links `v` below `p` through tree arc `e` carrying `flow`, and sets the
    /// potential of `v` so that `e` has zero reduced cost.
    fn hang(&mut self, v: usize, p: usize, e: usize, flow: f64) {
        self.arcs[e].flow = flow;
        self.state[e] = TREE;
        self.attach(v, p, e);
        let a = self.arcs[e];
        // Reduced cost of a tree arc (i → j) is c + π_i − π_j = 0.
        self.nodes[v].pot = if a.src as usize == v { self.nodes[p].pot - a.cost } else { self.nodes[p].pot + a.cost };
    }

    fn hang_tree(&mut self, prob: &FlowProblem, pairs: &[(usize, usize)]) -> Result<(), TransportError> {
        let n = self.n;
        if n == 0 {
            return Ok(());
        }
        let mut adj: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); n];
        for &(a, b) in pairs {
            let (x, y) = (prob.source[a], prob.target[a]);
            if prob.source[b] != y || prob.target[b] != x {
                return Err(TransportError::Solver("tree pair is not two opposite arcs".into()));
            }
            adj[x].push((y, a, b));
            adj[y].push((x, b, a));
        }
        let bfs = |start: usize| {
            let mut from = vec![usize::MAX; n];
            let mut dist = vec![usize::MAX; n];
            let mut queue = vec![start];
            dist[start] = 0;
            let mut head = 0;
            while head < queue.len() {
                let x = queue[head];
                head += 1;
                for &(y, _, _) in &adj[x] {
                    if dist[y] == usize::MAX {
                        dist[y] = dist[x] + 1;
                        from[y] = x;
                        queue.push(y);
                    }
                }
            }
            (queue, dist, from)
        };
        // Hang the tree from its centre to keep it shallow.
        let (queue, _, _) = bfs(0);
        if queue.len() != n {
            return Err(TransportError::Solver("initial tree does not span the nodes".into()));
        }
        let far = *queue.last().unwrap();
        let (queue, dist, from) = bfs(far);
        let mut r = *queue.last().unwrap();
        for _ in 0..dist[r] / 2 {
            r = from[r];
        }
        let (order, _, from) = bfs(r);
        let mut sub = prob.supply.clone();
        for &v in order.iter().skip(1).rev() {
            sub[from[v]] += sub[v];
        }
        self.hang(r, self.root, self.m + r, sub[r].abs());
        for &v in order.iter().skip(1) {
            let p = from[v];
            let &(_, into_v, out_of_v) = adj[p].iter().find(|t| t.0 == v).unwrap();
            // Net supply of the subtree leaves through the arc v → p.
            let e = if sub[v] > 0.0 { out_of_v } else { into_v };
            if sub[v].abs() > self.arcs[e].cap {
                return Err(TransportError::Solver("initial tree flow exceeds an arc capacity".into()));
            }
            self.hang(v, p, e, sub[v].abs());
        }
        Ok(())
    }

    fn compute_sizes(&mut self) {
        let mut order = vec![self.root as u32];
        let mut head = 0;
        while head < order.len() {
            let mut c = self.nodes[order[head] as usize].first_child;
            head += 1;
            while c != NONE {
                order.push(c);
                c = self.nodes[c as usize].next_sib;
            }
        }
        for node in &mut self.nodes {
            node.size = 1;
        }
        for &v in order.iter().skip(1).rev() {
            let p = self.nodes[v as usize].parent as usize;
            self.nodes[p].size += self.nodes[v as usize].size;
        }
    }

    #[inline]
    fn reduced(&self, e: usize) -> f64 {
        let a = &self.arcs[e];
        a.cost + self.nodes[a.src as usize].pot - self.nodes[a.tgt as usize].pot
    }

    /// Block search over real arcs; returns the most negative arc of the first
    /// block that contains one.
    fn find_entering(&mut self) -> Option<usize> {
        let m = self.m;
        if m == 0 {
            return None;
        }
        let mut best = usize::MAX;
        let mut best_rc = -self.eps;
        let mut count = 0;
        let mut e = self.next_arc;
        for _ in 0..m {
            let st = self.state[e];
            if st != TREE {
                let rc = st as f64 * self.reduced(e);
                if rc < best_rc {
                    best_rc = rc;
                    best = e;
                }
            }
            e += 1;
            if e == m {
                e = 0;
            }
            count += 1;
            if count == self.block {
                if best != usize::MAX {
                    self.next_arc = e;
                    return Some(best);
                }
                count = 0;
            }
        }
        if best != usize::MAX {
            self.next_arc = (best + 1) % m;
            Some(best)
        } else {
            None
        }
    }

    fn detach(&mut self, v: usize) {
        let TreeNode { parent, prev_sib, next_sib, .. } = self.nodes[v];
        if prev_sib != NONE {
            self.nodes[prev_sib as usize].next_sib = next_sib;
        } else if parent != NONE {
            self.nodes[parent as usize].first_child = next_sib;
        }
        if next_sib != NONE {
            self.nodes[next_sib as usize].prev_sib = prev_sib;
        }
        let node = &mut self.nodes[v];
        node.next_sib = NONE;
        node.prev_sib = NONE;
        node.parent = NONE;
    }

    fn attach(&mut self, v: usize, p: usize, arc: usize) {
        let head = self.nodes[p].first_child;
        if head != NONE {
            self.nodes[head as usize].prev_sib = v as u32;
        }
        self.nodes[p].first_child = v as u32;
        let node = &mut self.nodes[v];
        node.parent = p as u32;
        node.pred = arc as u32;
        node.prev_sib = NONE;
        node.next_sib = head;
    }

    #[inline]
    fn parent(&self, v: usize) -> usize {
        let p = self.nodes[v].parent;
        if p == NONE {
            usize::MAX
        } else {
            p as usize
        }
    }

    fn pivot(&mut self, e_in: usize) -> Result<(), TransportError> {
        // Flow is pushed from `u_in` to `v_in`: along the arc from the lower
        // bound, against it from the upper bound.
        let entering_up = self.state[e_in] == LOWER;
        let (u_in, v_in) = if entering_up {
            (self.arcs[e_in].src as usize, self.arcs[e_in].tgt as usize)
        } else {
            (self.arcs[e_in].tgt as usize, self.arcs[e_in].src as usize)
        };
        // Join node: walk both paths upwards, marking visited nodes.
        if self.stamp >= u32::MAX - 2 {
            self.mark.iter_mut().for_each(|s| *s = 0);
            self.stamp = 0;
        }
        self.stamp += 2;
        let (sa, sb) = (self.stamp, self.stamp + 1);
        let (mut a, mut b) = (u_in, v_in);
        let join = loop {
            if a != usize::MAX {
                if self.mark[a] == sb {
                    break a;
                }
                self.mark[a] = sa;
                a = self.parent(a);
            }
            if b != usize::MAX {
                if self.mark[b] == sa {
                    break b;
                }
                self.mark[b] = sb;
                b = self.parent(b);
            }
        };
        // Cycle orientation: join ⇝ u_in → v_in ⇝ join. On the u side the
        // cycle runs parent → w, on the v side w → parent. The leaving arc is
        // the last blocking arc along the cycle.
        let residual = |a: &ArcState, forward: bool| if forward { (a.cap - a.flow).max(0.0) } else { a.flow };
        let mut delta = f64::INFINITY;
        let mut leave = usize::MAX;
        let mut leave_on_u = false;
        let mut leave_full = false;
        let mut w = u_in;
        while w != join {
            let a = &self.arcs[self.nodes[w].pred as usize];
            let forward = a.tgt as usize == w;
            let r = residual(a, forward);
            if r < delta {
                delta = r;
                leave = w;
                leave_on_u = true;
                leave_full = forward;
            }
            w = self.parent(w);
        }
        let mut flip = false;
        if self.arcs[e_in].cap <= delta {
            delta = self.arcs[e_in].cap;
            flip = true;
        }
        let mut w = v_in;
        while w != join {
            let a = &self.arcs[self.nodes[w].pred as usize];
            let forward = a.src as usize == w;
            let r = residual(a, forward);
            if r <= delta {
                delta = r;
                leave = w;
                leave_on_u = false;
                leave_full = forward;
                flip = false;
            }
            w = self.parent(w);
        }
        if !delta.is_finite() {
            return Err(TransportError::Solver("unbounded cycle".into()));
        }
        if delta > 0.0 {
            if entering_up {
                self.arcs[e_in].flow += delta;
            } else {
                self.arcs[e_in].flow -= delta;
            }
            for (start, forward_is_tgt) in [(u_in, true), (v_in, false)] {
                let mut w = start;
                while w != join {
                    let a = &mut self.arcs[self.nodes[w].pred as usize];
                    let forward = if forward_is_tgt { a.tgt as usize == w } else { a.src as usize == w };
                    if forward {
                        a.flow += delta;
                    } else {
                        a.flow -= delta;
                    }
                    w = self.parent(w);
                }
            }
        }
        if flip {
            let a = &mut self.arcs[e_in];
            if entering_up {
                a.flow = a.cap;
                self.state[e_in] = UPPER;
            } else {
                a.flow = 0.0;
                self.state[e_in] = LOWER;
            }
            return Ok(());
        }
        if leave == usize::MAX {
            return Err(TransportError::Solver("no leaving arc".into()));
        }
        let e_out = self.nodes[leave].pred as usize;
        let out = &mut self.arcs[e_out];
        if leave_full {
            out.flow = out.cap;
            self.state[e_out] = UPPER;
        } else {
            out.flow = 0.0;
            self.state[e_out] = LOWER;
        }
        self.state[e_in] = TREE;
        // Re-hang the subtree below `leave` from the entering arc.
        let (inner, outer) = if leave_on_u { (u_in, v_in) } else { (v_in, u_in) };
        self.path.clear();
        self.path.push(inner as u32);
        while *self.path.last().unwrap() as usize != leave {
            let x = *self.path.last().unwrap() as usize;
            self.path.push(self.nodes[x].parent);
        }
        let moved = self.nodes[leave].size;
        let mut q = self.parent(leave);
        while q != join {
            self.nodes[q].size -= moved;
            q = self.parent(q);
        }
        let mut q = outer;
        while q != join {
            self.nodes[q].size += moved;
            q = self.parent(q);
        }
        self.old_pred.clear();
        for j in 0..self.path.len() {
            let pred = self.nodes[self.path[j] as usize].pred;
            self.old_pred.push(pred);
        }
        for j in (1..self.path.len()).rev() {
            let below = self.nodes[self.path[j - 1] as usize].size;
            self.nodes[self.path[j] as usize].size = moved - below;
        }
        self.nodes[inner].size = moved;
        for j in (0..self.path.len()).rev() {
            self.detach(self.path[j] as usize);
        }
        self.attach(inner, outer, e_in);
        for j in 1..self.path.len() {
            self.attach(self.path[j] as usize, self.path[j - 1] as usize, self.old_pred[j - 1] as usize);
        }
        // Make c + π_src − π_tgt = 0 for the entering arc.
        let a = self.arcs[e_in];
        let shift = if a.src as usize == inner {
            self.nodes[outer].pot - a.cost - self.nodes[inner].pot
        } else {
            self.nodes[outer].pot + a.cost - self.nodes[inner].pot
        };
        // Potentials matter only up to a constant, so shift whichever side
        // of the tree is smaller.
        if 2 * moved as usize <= self.n + 1 {
            self.shift_subtree(inner as u32, NONE, shift);
        } else {
            self.shift_subtree(self.root as u32, inner as u32, -shift);
        }
        Ok(())
    }

    /// Adds `shift` to the potentials of the subtree at `top`, skipping the
    /// subtree at `skip`.
    fn shift_subtree(&mut self, top: u32, skip: u32, shift: f64) {
        let nodes = &mut self.nodes[..];
        let mut x = top;
        'walk: loop {
            let node = &mut nodes[x as usize];
            node.pot += shift;
            let mut c = node.first_child;
            if c == skip && c != NONE {
                c = nodes[c as usize].next_sib;
            }
            if c != NONE {
                x = c;
                continue;
            }
            loop {
                if x == top {
                    break 'walk;
                }
                let node = &nodes[x as usize];
                let mut s = node.next_sib;
                if s == skip && s != NONE {
                    s = nodes[s as usize].next_sib;
                }
                if s != NONE {
                    x = s;
                    break;
                }
                x = node.parent;
            }
        }
    }

    fn solve(mut self) -> Result<FlowSolution, TransportError> {
        let mut pivots = 0usize;
        while let Some(e) = self.find_entering() {
            self.pivot(e)?;
            pivots += 1;
        }
        let artificial: f64 = self.arcs[self.m..].iter().map(|a| a.flow).sum();
        if artificial > 1e-9 * self.scale {
            return Err(TransportError::Solver(format!("artificial flow {artificial:e} remains")));
        }
        let flow: Vec<f64> = self.arcs[..self.m].iter().map(|a| a.flow).collect();
        let cost = self.arcs[..self.m].iter().map(|a| a.flow * a.cost).sum();
        Ok(FlowSolution { flow, cost, pivots })
    }
}

/// Solves an uncapacitated min-cost flow problem exactly (up to rounding).
pub fn network_simplex(prob: &FlowProblem) -> Result<FlowSolution, TransportError> {
    let total: f64 = prob.supply.iter().sum();
    let scale: f64 = prob.supply.iter().map(|s| s.abs()).sum::<f64>().max(1.0);
    if total.abs() > 1e-9 * scale {
        return Err(TransportError::Solver(format!("supplies sum to {total:e}")));
    }
    Simplex::new(prob, None)?.solve()
}

/// As [`network_simplex`], starting from a spanning tree given as pairs of
/// opposite arcs.
pub fn network_simplex_from_tree(prob: &FlowProblem, tree: &[(usize, usize)]) -> Result<FlowSolution, TransportError> {
    let total: f64 = prob.supply.iter().sum();
    let scale: f64 = prob.supply.iter().map(|s| s.abs()).sum::<f64>().max(1.0);
    if total.abs() > 1e-9 * scale {
        return Err(TransportError::Solver(format!("supplies sum to {total:e}")));
    }
    Simplex::new(prob, Some(tree))?.solve()
}

/// Distance and optimal plan of an exact transport problem.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub distance: f64,
    /// Nonzero entries `(i, j, mass)`.
    pub plan: Vec<(usize, usize, f64)>,
}

/// Exact `W_m` between two measures of at most [`EXACT_BUDGET`] atoms each.
pub fn w_discrete_exact(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    metric: GroundMetric,
    m: u32,
) -> Result<TransportPlan, TransportError> {
    check_order(m)?;
    for d in [mu, nu] {
        DiscreteMeasure::new(d.dim, d.points.clone(), d.weights.clone())?;
        if d.len() > EXACT_BUDGET {
            return Err(TransportError::Budget { atoms: d.len(), budget: EXACT_BUDGET });
        }
    }
    if mu.dim != nu.dim {
        return Err(TransportError::Dimension(format!("{} vs {}", mu.dim, nu.dim)));
    }
    let (na, nb) = (mu.len(), nu.len());
    let mut prob = FlowProblem::with_nodes(na + nb);
    prob.supply[..na].copy_from_slice(&mu.weights);
    for j in 0..nb {
        prob.supply[na + j] = -nu.weights[j];
    }
    for i in 0..na {
        for j in 0..nb {
            let d = metric.distance(mu.atom(i), nu.atom(j));
            prob.add_arc(i, na + j, if m == 1 { d } else { d * d });
        }
    }
    let sol = network_simplex(&prob)?;
    let plan: Vec<(usize, usize, f64)> =
        sol.flow.iter().enumerate().filter(|(_, &f)| f > 0.0).map(|(e, &f)| (e / nb, e % nb, f)).collect();
    let cost = sol.cost.max(0.0);
    Ok(TransportPlan { distance: if m == 1 { cost } else { cost.sqrt() }, plan })
}

/// Result of a `W_1` computation that may fall back to a coupling bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct W1Estimate {
    pub value: f64,
    /// `false` when the value is only an upper bound.
    pub exact: bool,
}

/// `W_1` on `Q × R^B` under `|x − y| + |u − v|`.
///
/// Over the exact budget, `allow_fallback` selects the north-west-corner
/// coupling of the lexicographically sorted atoms, which is an upper bound.
pub fn w1_product_space(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    dim_x: usize,
    allow_fallback: bool,
) -> Result<W1Estimate, TransportError> {
    let metric = GroundMetric::Product { dim_x };
    if mu.len() <= EXACT_BUDGET && nu.len() <= EXACT_BUDGET {
        let p = w_discrete_exact(mu, nu, metric, 1)?;
        return Ok(W1Estimate { value: p.distance, exact: true });
    }
    if !allow_fallback {
        return Err(TransportError::Budget { atoms: mu.len().max(nu.len()), budget: EXACT_BUDGET });
    }
    Ok(W1Estimate { value: northwest_corner_bound(mu, nu, metric), exact: false })
}

fn northwest_corner_bound(mu: &DiscreteMeasure, nu: &DiscreteMeasure, metric: GroundMetric) -> f64 {
    let order = |d: &DiscreteMeasure| {
        let mut idx: Vec<usize> = (0..d.len()).collect();
        idx.sort_by(|&a, &b| {
            d.atom(a)
                .iter()
                .zip(d.atom(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        idx
    };
    let (ia, ib) = (order(mu), order(nu));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (mu.weights[ia[0]], nu.weights[ib[0]]);
    let mut acc = 0.0;
    while i < ia.len() && j < ib.len() {
        let s = ra.min(rb);
        acc += s * metric.distance(mu.atom(ia[i]), nu.atom(ib[j]));
        ra -= s;
        rb -= s;
        if ra <= 1e-15 {
            i += 1;
            if i < ia.len() {
                ra += mu.weights[ia[i]];
            }
        }
        if rb <= 1e-15 {
            j += 1;
            if j < ib.len() {
                rb += nu.weights[ib[j]];
            }
        }
    }
    acc
}

/// `(1/n) Σ d(a_i, b_i)` for index-paired uniform atoms.
pub fn coupling_upper_bound(
    left: &DiscreteMeasure,
    right: &DiscreteMeasure,
    metric: GroundMetric,
) -> Result<f64, TransportError> {
    if left.len() != right.len() {
        return Err(TransportError::Mismatch { left: left.len(), right: right.len() });
    }
    if left.is_empty() {
        return Err(TransportError::Empty);
    }
    if left.dim != right.dim {
        return Err(TransportError::Dimension(format!("{} vs {}", left.dim, right.dim)));
    }
    let n = left.len() as f64;
    Ok((0..left.len()).map(|i| metric.distance(left.atom(i), right.atom(i))).sum::<f64>() / n)
}

/// Mean and spread of exact `W_1` over uniform subsamples of size [`EXACT_BUDGET`].
///
/// Measures with the same atom count are treated as index-paired and share
/// the drawn indices.
pub fn subsampled_w1(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    dim_x: usize,
    repetitions: usize,
    seed: u64,
    key: u64,
) -> Result<(f64, f64), TransportError> {
    let metric = GroundMetric::Product { dim_x };
    let mut vals = Vec::with_capacity(repetitions);
    for r in 0..repetitions {
        let pick = |d: &DiscreteMeasure, side: u64| -> Result<DiscreteMeasure, TransportError> {
            if d.len() <= EXACT_BUDGET {
                return Ok(d.clone());
            }
            let mut rng = stream(seed, Purpose::Subsample, key, r as u64, side);
            let mut idx = sample(&mut rng, d.len(), EXACT_BUDGET).into_vec();
            idx.sort_unstable();
            let pts: Vec<f64> = idx.iter().flat_map(|&i| d.atom(i).to_vec()).collect();
            let w: Vec<f64> = idx.iter().map(|&i| d.weights[i]).collect();
            let tot: f64 = w.iter().sum();
            DiscreteMeasure::new(d.dim, pts, w.iter().map(|x| x / tot).collect())
        };
        let a = pick(mu, 0)?;
        let b = pick(nu, if mu.len() == nu.len() { 0 } else { 1 })?;
        vals.push(w_discrete_exact(&a, &b, metric, 1)?.distance);
    }
    let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
    let spread = vals.iter().fold(0.0f64, |a, v| a.max((v - mean).abs()));
    Ok((mean, spread))
}

/// Column-structured measure on `[0,1] × R`: masses on a fixed set of
/// levels at each of `P` column abscissae.
#[derive(Clone, Debug)]
pub struct LatticeDensity {
    pub columns: Vec<f64>,
    pub levels: Vec<f64>,
    /// `[column][level]`, summing to 1 overall.
    pub masses: Vec<f64>,
}

/// Exact `W_1` under `|x − y| + |u − v|` between a lattice density and
/// weighted points lying on its columns.
///
/// The ground metric is the shortest-path metric of the graph joining
/// consecutive points along each column and equal levels of adjacent
/// columns, so the transport problem reduces to a sparse transshipment
/// problem on that graph. Columns without points never need vertical moves,
/// which leaves a graph on the occupied columns only.
pub fn lattice_w1(density: &LatticeDensity, points: &[(usize, f64, f64)]) -> Result<f64, TransportError> {
    let pc = density.columns.len();
    let nl = density.levels.len();
    if pc == 0 || nl == 0 || density.masses.len() != pc * nl {
        return Err(TransportError::Dimension("lattice masses do not match columns × levels".into()));
    }
    if density.levels.windows(2).any(|w| w[1] <= w[0]) || density.columns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(TransportError::Dimension("columns and levels must be strictly increasing".into()));
    }
    if points.is_empty() {
        return Err(TransportError::Empty);
    }
    let mut occupied = vec![false; pc];
    for &(c, _, _) in points {
        if c >= pc {
            return Err(TransportError::Dimension(format!("column {c} out of range")));
        }
        occupied[c] = true;
    }
    let occ: Vec<usize> = (0..pc).filter(|&c| occupied[c]).collect();
    let x = &density.columns;
    // Only occupied columns get nodes. Mass in an empty column moves
    // horizontally to one of its two occupied neighbours: the nearer one by
    // default, with a capacitated arc pricing the switch to the farther one.
    let mut per_col: Vec<Vec<(f64, f64)>> = vec![Vec::new(); occ.len()];
    let mut slot = vec![usize::MAX; pc];
    for (j, &c) in occ.iter().enumerate() {
        slot[c] = j;
        per_col[j] = density.levels.iter().enumerate().map(|(l, &v)| (v, density.masses[c * nl + l])).collect();
    }
    for &(c, u, w) in points {
        per_col[slot[c]].push((u, -w));
    }
    let mut base = 0.0;
    let mut redirects = Vec::new();
    for c in (0..pc).filter(|&c| !occupied[c]) {
        let right = occ.partition_point(|&o| o < c);
        let (near, far) = match (right.checked_sub(1), occ.get(right)) {
            (Some(l), Some(&ob)) => {
                let oa = occ[l];
                if x[c] - x[oa] <= x[ob] - x[c] {
                    (l, Some(right))
                } else {
                    (right, Some(l))
                }
            }
            (Some(l), None) => (l, None),
            (None, _) => (right, None),
        };
        let d_near = (x[c] - x[occ[near]]).abs();
        for l in 0..nl {
            let m = density.masses[c * nl + l];
            if m <= 0.0 {
                continue;
            }
            base += m * d_near;
            per_col[near].push((density.levels[l], m));
            if let Some(f) = far {
                let extra = (x[c] - x[occ[f]]).abs() - d_near;
                redirects.push((near, f, l, m, extra));
            }
        }
    }
    let spine = (0..nl)
        .max_by(|&a, &b| {
            let ma: f64 = (0..pc).map(|c| density.masses[c * nl + a]).sum();
            let mb: f64 = (0..pc).map(|c| density.masses[c * nl + b]).sum();
            ma.total_cmp(&mb)
        })
        .unwrap_or(0);
    let mut prob = FlowProblem::with_nodes(0);
    let mut level_node = vec![0usize; occ.len() * nl];
    let mut tree = Vec::new();
    for (j, list) in per_col.iter_mut().enumerate() {
        list.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut prev: Option<(usize, f64)> = None;
        for &(v, s) in list.iter() {
            let node = match prev {
                Some((id, pv)) if pv == v => {
                    prob.supply[id] += s;
                    id
                }
                _ => {
                    prob.supply.push(s);
                    let id = prob.supply.len() - 1;
                    if let Some((pid, pv)) = prev {
                        let a = prob.add_arc(pid, id, v - pv);
                        let b = prob.add_arc(id, pid, v - pv);
                        tree.push((a, b));
                    }
                    id
                }
            };
            prev = Some((node, v));
            if let Ok(l) = density.levels.binary_search_by(|x| x.total_cmp(&v)) {
                level_node[j * nl + l] = node;
            }
        }
    }
    for j in 0..occ.len().saturating_sub(1) {
        let dx = x[occ[j + 1]] - x[occ[j]];
        for l in 0..nl {
            let (a, b) = (level_node[j * nl + l], level_node[(j + 1) * nl + l]);
            let e = prob.add_arc(a, b, dx);
            let f = prob.add_arc(b, a, dx);
            if l == spine {
                tree.push((e, f));
            }
        }
    }
    for &(near, far, l, m, extra) in &redirects {
        prob.add_bounded_arc(level_node[near * nl + l], level_node[far * nl + l], extra, m);
    }
    let net: f64 = prob.supply.iter().sum();
    if net.abs() > 1e-9 {
        return Err(TransportError::BadWeights { sum: 1.0 + net, min: 0.0 });
    }
    // Absorb rounding so supplies balance exactly.
    if let Some(last) = prob.supply.iter_mut().rev().find(|s| **s > 0.0) {
        *last -= net;
    }
    let sol = network_simplex_from_tree(&prob, &tree)?;
    Ok(base + sol.cost)
}

/// Exact `W1` between equally weighted samples and a density that is uniform
/// inside each cell `[edges[c], edges[c+1])` with mass `masses[c]`.
pub fn w1_samples_vs_histogram(samples: &[f64], edges: &[f64], masses: &[f64]) -> Result<f64, TransportError> {
    if samples.is_empty() || masses.is_empty() {
        return Err(TransportError::Empty);
    }
    if edges.len() != masses.len() + 1 || edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(TransportError::Dimension("edges must be increasing with one more entry than masses".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let total: f64 = masses.iter().sum();
    let w = 1.0 / xs.len() as f64;
    // Histogram CDF is linear between consecutive breakpoints.
    let mut cdf = vec![0.0; edges.len()];
    for c in 0..masses.len() {
        cdf[c + 1] = cdf[c] + masses[c] / total;
    }
    let hist_cdf = |x: f64| -> f64 {
        if x <= edges[0] {
            return 0.0;
        }
        if x >= edges[edges.len() - 1] {
            return 1.0;
        }
        let c = edges.partition_point(|&e| e <= x) - 1;
        cdf[c] + (cdf[c + 1] - cdf[c]) * (x - edges[c]) / (edges[c + 1] - edges[c])
    };
    let mut breaks: Vec<f64> = edges.iter().chain(xs.iter()).cloned().collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut out = 0.0;
    let mut below = 0usize;
    for seg in breaks.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        while below < xs.len() && xs[below] <= a {
            below += 1;
        }
        let e = below as f64 * w;
        let (fa, fb) = (hist_cdf(a) - e, hist_cdf(b) - e);
        out += if fa * fb >= 0.0 {
            0.5 * (fa.abs() + fb.abs()) * (b - a)
        } else {
            0.5 * (fa * fa + fb * fb) / (fa - fb).abs() * (b - a)
        };
    }
    Ok(out)
}
