//! Per-agent execution of the flow.
//!
//! A synchronous sweep has two phases. Each human proxy first turns the `x`
//! blocks it received into one [`Payload::Feedback`] per autonomous
//! neighbor, carrying `J_jᵀ(∇g_k(y_k) + B_kᵀ λ_k)`. Every agent then runs
//! [`agent_round`] on its neighbors' state messages and (for autonomous
//! agents) the feedback addressed to it. One sweep equals one compact
//! [`step`](super::step).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::{human_feedback, SystemState};
use crate::error::{Error, Result};
use crate::human::{ApproximationSchedule, HumanResponseModel};
use crate::model::{CostFunction, Scenario};
use crate::reformulation::DecoupledConstraint;
use crate::scalar::Scalar;
use crate::topology::AgentKind;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload<T: Scalar> {
    /// Post-update `(z, λ)` of the sender; `x` is attached when an
    /// autonomous agent writes to a human proxy.
    State {
        z: DVector<T>,
        lambda: DVector<T>,
        x: Option<DVector<T>>,
    },
    /// Human cross term for the receiving autonomous agent's gradient.
    Feedback { gradient: DVector<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message<T: Scalar> {
    pub sender: String,
    pub receiver: String,
    pub payload: Payload<T>,
}

/// What an autonomous agent knows: its own blocks and problem data.
#[derive(Debug, Clone)]
pub struct AutonomousView<T: Scalar> {
    pub id: String,
    pub x: DVector<T>,
    pub z: DVector<T>,
    pub lambda: DVector<T>,
    pub t: T,
    pub cost: CostFunction<T>,
    pub a: DMatrix<T>,
    pub c: DVector<T>,
    /// Neighbor ids with their kinds, in canonical order.
    pub neighbors: Vec<(String, AgentKind)>,
}

/// What a human's virtual proxy knows.
#[derive(Debug, Clone)]
pub struct ProxyView<T: Scalar> {
    pub id: String,
    pub z: DVector<T>,
    pub lambda: DVector<T>,
    pub t: T,
    pub model: HumanResponseModel<T>,
    pub schedule: Option<ApproximationSchedule<T>>,
    pub cost: CostFunction<T>,
    pub b: DMatrix<T>,
    pub c: DVector<T>,
    pub neighbors: Vec<(String, AgentKind)>,
}

#[derive(Debug, Clone)]
pub enum LocalView<T: Scalar> {
    Autonomous(AutonomousView<T>),
    Proxy(ProxyView<T>),
}

impl<T: Scalar> LocalView<T> {
    /// Slices node `node`'s view out of a global state.
    pub fn extract(
        scenario: &Scenario<T>,
        dc: &DecoupledConstraint<T>,
        state: &SystemState<T>,
        node: usize,
    ) -> Self {
        let dims = scenario.dimensions();
        let topo = scenario.topology();
        let neighbors = topo
            .neighbor_indices(node)
            .iter()
            .map(|&u| (topo.id_at(u).to_string(), topo.kind_at(u)))
            .collect();
        let z = state.z_block(dims, node).into_owned();
        let lambda = state.lambda_block(dims, node).into_owned();
        let c = dc.c_block(node).into_owned();
        let id = topo.id_at(node).to_string();
        if node < dims.m {
            LocalView::Autonomous(AutonomousView {
                id,
                x: state.x_block(dims, node).into_owned(),
                z,
                lambda,
                t: state.t,
                cost: scenario.cost(node).clone(),
                a: scenario.a_block(node).clone(),
                c,
                neighbors,
            })
        } else {
            let k = node - dims.m;
            LocalView::Proxy(ProxyView {
                id,
                z,
                lambda,
                t: state.t,
                model: scenario.human_model(k).clone(),
                schedule: scenario.schedule(k).cloned(),
                cost: scenario.cost(node).clone(),
                b: scenario.b_block(k).clone(),
                c,
                neighbors,
            })
        }
    }

    pub fn id(&self) -> &str {
        match self {
            LocalView::Autonomous(v) => &v.id,
            LocalView::Proxy(v) => &v.id,
        }
    }

    pub fn neighbors(&self) -> &[(String, AgentKind)] {
        match self {
            LocalView::Autonomous(v) => &v.neighbors,
            LocalView::Proxy(v) => &v.neighbors,
        }
    }

    pub fn z(&self) -> &DVector<T> {
        match self {
            LocalView::Autonomous(v) => &v.z,
            LocalView::Proxy(v) => &v.z,
        }
    }

    pub fn lambda(&self) -> &DVector<T> {
        match self {
            LocalView::Autonomous(v) => &v.lambda,
            LocalView::Proxy(v) => &v.lambda,
        }
    }

    pub fn t(&self) -> T {
        match self {
            LocalView::Autonomous(v) => v.t,
            LocalView::Proxy(v) => v.t,
        }
    }

    /// State messages this agent sends to each neighbor.
    pub fn outbox(&self) -> Vec<Message<T>> {
        let x = match self {
            LocalView::Autonomous(v) => Some(&v.x),
            LocalView::Proxy(_) => None,
        };
        self.neighbors()
            .iter()
            .map(|(nb, kind)| Message {
                sender: self.id().to_string(),
                receiver: nb.clone(),
                payload: Payload::State {
                    z: self.z().clone(),
                    lambda: self.lambda().clone(),
                    x: match kind {
                        AgentKind::Human => x.cloned(),
                        AgentKind::Autonomous => None,
                    },
                },
            })
            .collect()
    }
}

struct NeighborState<'a, T: Scalar> {
    z: &'a DVector<T>,
    lambda: &'a DVector<T>,
    x: Option<&'a DVector<T>>,
}

/// Indexes an inbox by sender, rejecting anything a neighbor could not send.
struct Inbox<'a, T: Scalar> {
    states: BTreeMap<&'a str, NeighborState<'a, T>>,
    feedback: BTreeMap<&'a str, &'a DVector<T>>,
}

fn protocol(sender: &str, receiver: &str, detail: impl Into<String>) -> Error {
    Error::Protocol {
        sender: sender.to_string(),
        receiver: receiver.to_string(),
        detail: detail.into(),
    }
}

impl<'a, T: Scalar> Inbox<'a, T> {
    fn parse(
        me: &str,
        neighbors: &[(String, AgentKind)],
        rows: usize,
        inbox: &'a [Message<T>],
    ) -> Result<Self> {
        let mut states = BTreeMap::new();
        let mut feedback = BTreeMap::new();
        for msg in inbox {
            if msg.receiver != me {
                return Err(protocol(&msg.sender, &msg.receiver, format!("delivered to {me}")));
            }
            if !neighbors.iter().any(|(n, _)| *n == msg.sender) {
                return Err(protocol(&msg.sender, me, "sender is not a neighbor"));
            }
            let duplicate = match &msg.payload {
                Payload::State { z, lambda, x } => {
                    if z.len() != rows || lambda.len() != rows {
                        return Err(protocol(&msg.sender, me, "state block has wrong length"));
                    }
                    states
                        .insert(msg.sender.as_str(), NeighborState { z, lambda, x: x.as_ref() })
                        .is_some()
                }
                Payload::Feedback { gradient } => {
                    feedback.insert(msg.sender.as_str(), gradient).is_some()
                }
            };
            if duplicate {
                return Err(protocol(&msg.sender, me, "duplicate message"));
            }
        }
        for (n, _) in neighbors {
            if !states.contains_key(n.as_str()) {
                return Err(protocol(n, me, "missing state message"));
            }
        }
        Ok(Self { states, feedback })
    }
}

/// Consensus terms `Σ_u (λ_v - λ_u)` and `Σ_u (z_v - z_u)` over the inbox.
fn differences<T: Scalar>(
    neighbors: &[(String, AgentKind)],
    inbox: &Inbox<'_, T>,
    z: &DVector<T>,
    lambda: &DVector<T>,
) -> (DVector<T>, DVector<T>) {
    let mut dl = DVector::zeros(lambda.len());
    let mut dz = DVector::zeros(z.len());
    for (n, _) in neighbors {
        let s = &inbox.states[n.as_str()];
        dl += lambda - s.lambda;
        dz += z - s.z;
    }
    (dl, dz)
}

/// Neighbor `x` blocks in the model's neighbor order.
fn neighbor_x<'a, T: Scalar>(
    view: &ProxyView<T>,
    inbox: &Inbox<'a, T>,
) -> Result<Vec<&'a [T]>> {
    view.model
        .neighbor_ids()
        .iter()
        .map(|j| {
            inbox.states[j.as_str()]
                .x
                .map(|x| x.as_slice())
                .ok_or_else(|| protocol(j, &view.id, "state message lacks x block"))
        })
        .collect()
}

/// Phase one of a sweep: the feedback each autonomous neighbor needs.
pub fn proxy_feedback<T: Scalar>(
    view: &ProxyView<T>,
    inbox: &[Message<T>],
) -> Result<Vec<Message<T>>> {
    let parsed = Inbox::parse(&view.id, &view.neighbors, view.z.len(), inbox)?;
    let blocks = neighbor_x(view, &parsed)?;
    let eval = view.model.evaluate_blocks(&blocks, view.t, view.schedule.as_ref())?;
    let terms = human_feedback(&view.cost, &view.b, &eval, view.lambda.rows(0, view.lambda.len()));
    Ok(view
        .model
        .neighbor_ids()
        .iter()
        .zip(terms)
        .map(|(j, gradient)| Message {
            sender: view.id.clone(),
            receiver: j.clone(),
            payload: Payload::Feedback { gradient },
        })
        .collect())
}

/// Phase two of a sweep: one projected Euler update of this agent's blocks.
///
/// `inbox` must hold one state message from every neighbor and, for an
/// autonomous agent, one feedback message from every human neighbor.
pub fn agent_round<T: Scalar>(
    view: &LocalView<T>,
    inbox: &[Message<T>],
    dt: T,
) -> Result<(LocalView<T>, Vec<Message<T>>)> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidArgument(format!("step size {dt} must be positive")));
    }
    let next = match view {
        LocalView::Autonomous(v) => {
            let parsed = Inbox::parse(&v.id, &v.neighbors, v.z.len(), inbox)?;
            let mut grad = v.cost.gradient(v.x.as_slice());
            grad.gemv_tr(T::one(), &v.a, &v.lambda, T::one());
            for (n, kind) in &v.neighbors {
                if *kind == AgentKind::Human {
                    let fb = parsed
                        .feedback
                        .get(n.as_str())
                        .ok_or_else(|| protocol(n, &v.id, "missing feedback message"))?;
                    if fb.len() != grad.len() {
                        return Err(protocol(n, &v.id, "feedback has wrong length"));
                    }
                    grad += *fb;
                }
            }
            if let Some((&s, _)) = parsed
                .feedback
                .iter()
                .find(|(s, _)| !v.neighbors.iter().any(|(n, k)| n == *s && *k == AgentKind::Human))
            {
                return Err(protocol(s, &v.id, "feedback from a non-human sender"));
            }
            let (dl, dz) = differences(&v.neighbors, &parsed, &v.z, &v.lambda);
            let residual = &v.a * &v.x + &v.c + dz;
            let mut out = v.clone();
            out.x.axpy(-dt, &grad, T::one());
            out.z.axpy(-dt, &dl, T::one());
            out.lambda.axpy(dt, &residual, T::one());
            out.lambda.apply(|l| *l = l.max(T::zero()));
            out.t = v.t + dt;
            LocalView::Autonomous(out)
        }
        LocalView::Proxy(v) => {
            let parsed = Inbox::parse(&v.id, &v.neighbors, v.z.len(), inbox)?;
            if let Some((&s, _)) = parsed.feedback.iter().next() {
                return Err(protocol(s, &v.id, "human proxies do not receive feedback"));
            }
            let blocks = neighbor_x(v, &parsed)?;
            let eval = v.model.evaluate_blocks(&blocks, v.t, v.schedule.as_ref())?;
            let (dl, dz) = differences(&v.neighbors, &parsed, &v.z, &v.lambda);
            let residual = &v.b * &eval.y + &v.c + dz;
            let mut out = v.clone();
            out.z.axpy(-dt, &dl, T::one());
            out.lambda.axpy(dt, &residual, T::one());
            out.lambda.apply(|l| *l = l.max(T::zero()));
            out.t = v.t + dt;
            LocalView::Proxy(out)
        }
    };
    let outbox = next.outbox();
    Ok((next, outbox))
}

/// Barrier-synchronized runner: every agent holds only its local view and
/// the messages addressed to it.
#[derive(Debug, Clone)]
pub struct SyncNetwork<T: Scalar> {
    views: Vec<LocalView<T>>,
    index: BTreeMap<String, usize>,
    pending: Vec<Vec<Message<T>>>,
}

impl<T: Scalar> SyncNetwork<T> {
    pub fn new(
        scenario: &Scenario<T>,
        dc: &DecoupledConstraint<T>,
        state: &SystemState<T>,
    ) -> Result<Self> {
        state.check(scenario.dimensions())?;
        let views: Vec<_> = (0..scenario.dimensions().nodes())
            .map(|v| LocalView::extract(scenario, dc, state, v))
            .collect();
        let index = views
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id().to_string(), i))
            .collect();
        let mut net = Self {
            pending: vec![Vec::new(); views.len()],
            views,
            index,
        };
        let initial: Vec<_> = net.views.iter().flat_map(|v| v.outbox()).collect();
        net.deliver(initial)?;
        Ok(net)
    }

    fn deliver(&mut self, messages: Vec<Message<T>>) -> Result<()> {
        for m in messages {
            let &r = self
                .index
                .get(&m.receiver)
                .ok_or_else(|| protocol(&m.sender, &m.receiver, "unknown receiver"))?;
            self.pending[r].push(m);
        }
        Ok(())
    }

    pub fn views(&self) -> &[LocalView<T>] {
        &self.views
    }

    /// Messages currently waiting for each agent, in canonical order.
    pub fn inboxes(&self) -> &[Vec<Message<T>>] {
        &self.pending
    }

    /// One full two-phase sweep.
    pub fn sweep(&mut self, dt: T) -> Result<()> {
        let mut feedback = Vec::new();
        for (v, view) in self.views.iter().enumerate() {
            if let LocalView::Proxy(p) = view {
                feedback.extend(proxy_feedback(p, &self.pending[v])?);
            }
        }
        self.deliver(feedback)?;
        let inboxes = std::mem::replace(&mut self.pending, vec![Vec::new(); self.views.len()]);
        let mut outgoing = Vec::new();
        for (view, inbox) in self.views.iter_mut().zip(&inboxes) {
            let (next, out) = agent_round(view, inbox, dt)?;
            *view = next;
            outgoing.extend(out);
        }
        self.deliver(outgoing)
    }

    /// Overrides every agent's clock, keeping the runner on the same time
    /// grid as the compact integrator.
    pub fn set_time(&mut self, t: T) {
        for v in &mut self.views {
            match v {
                LocalView::Autonomous(a) => a.t = t,
                LocalView::Proxy(p) => p.t = t,
            }
        }
    }

    /// Reassembles the compact state from the local views.
    pub fn state(&self, scenario: &Scenario<T>) -> SystemState<T> {
        let dims = scenario.dimensions();
        let mut s = SystemState::zeros(dims);
        for (v, view) in self.views.iter().enumerate() {
            if let LocalView::Autonomous(a) = view {
                s.x.rows_mut(dims.x_offsets[v], a.x.len()).copy_from(&a.x);
            }
            s.z.rows_mut(v * dims.rows, dims.rows).copy_from(view.z());
            s.lambda.rows_mut(v * dims.rows, dims.rows).copy_from(view.lambda());
        }
        s.t = self.views[0].t();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{flow_rhs, step};
    use crate::harness::presets::{random_scenario, RandomScenarioConfig};
    use crate::reformulation::{build_decoupled, SplitPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(s: &Scenario<f64>, rng: &mut ChaCha8Rng) -> SystemState<f64> {
        let mut st = SystemState::zeros(s.dimensions());
        st.x.apply(|e| *e = rng.gen_range(-1.0..1.0));
        st.z.apply(|e| *e = rng.gen_range(-1.0..1.0));
        st.lambda.apply(|e| *e = rng.gen_range(0.0..2.0));
        st
    }

    #[test]
    fn sweep_matches_compact_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let s = random_scenario(&mut rng, &RandomScenarioConfig::default()).unwrap();
            let dc = build_decoupled(&s, SplitPolicy::FirstAgent);
            let st = random_state(&s, &mut rng);
            let mut net = SyncNetwork::new(&s, &dc, &st).unwrap();
            net.sweep(1e-2).unwrap();
            let dist = net.state(&s);
            let compact = step(&s, &dc, &st, 1e-2).unwrap();
            let err = (&dist.x - &compact.x)
                .amax()
                .max((&dist.z - &compact.z).amax())
                .max((&dist.lambda - &compact.lambda).amax());
            assert!(err <= 1e-12, "max entry error {err}");
        }
    }

    #[test]
    fn isolated_autonomous_update() {
        // A single autonomous neighbor pair without humans: the x update is
        // -∇f - Aᵀλ exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = RandomScenarioConfig {
            human_fraction: 0.0,
            ..Default::default()
        };
        let s = random_scenario(&mut rng, &cfg).unwrap();
        let dc = build_decoupled(&s, SplitPolicy::FirstAgent);
        let st = random_state(&s, &mut rng);
        let rhs = flow_rhs(&s, &dc, &st).unwrap();
        let net = SyncNetwork::new(&s, &dc, &st).unwrap();
        let dt = 1e-3;
        let LocalView::Autonomous(v) = &net.views()[0] else { panic!() };
        let (next, _) = agent_round(&net.views()[0], &net.inboxes()[0], dt).unwrap();
        let LocalView::Autonomous(n) = next else { panic!() };
        let expected = -(v.cost.gradient(v.x.as_slice()) + v.a.tr_mul(&v.lambda));
        let got = (&n.x - &v.x) / dt;
        assert!((&got - &expected).amax() < 1e-9);
        let dims = s.dimensions();
        assert!((&got - rhs.dx.rows(0, dims.x_range(0).len())).amax() < 1e-9);
    }

    #[test]
    fn missing_and_stray_messages_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_scenario(&mut rng, &RandomScenarioConfig::default()).unwrap();
        let dc = build_decoupled(&s, SplitPolicy::FirstAgent);
        let st = random_state(&s, &mut rng);
        let net = SyncNetwork::new(&s, &dc, &st).unwrap();
        let view = &net.views()[0];
        let mut inbox = net.inboxes()[0].clone();
        let dropped = inbox.pop().unwrap();
        match agent_round(view, &inbox, 1e-3) {
            Err(Error::Protocol { sender, receiver, .. }) => {
                assert_eq!(receiver, view.id());
                assert_eq!(sender, dropped.sender);
            }
            other => panic!("expected protocol error, got {other:?}"),
        }
        let topo = s.topology();
        if let Some(stranger) =
            (1..topo.node_count()).find(|&u| !topo.are_neighbors(0, u))
        {
            let mut inbox = net.inboxes()[0].clone();
            inbox.push(Message {
                sender: topo.id_at(stranger).to_string(),
                receiver: view.id().to_string(),
                payload: Payload::State {
                    z: DVector::zeros(dims_rows(&s)),
                    lambda: DVector::zeros(dims_rows(&s)),
                    x: None,
                },
            });
            assert!(matches!(agent_round(view, &inbox, 1e-3), Err(Error::Protocol { .. })));
        }
    }

    fn dims_rows(s: &Scenario<f64>) -> usize {
        s.dimensions().rows
    }
}
