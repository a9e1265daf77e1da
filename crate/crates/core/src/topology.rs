//! Undirected communication graph over autonomous and human agents.
//!
//! Vertices are kept in a canonical order: autonomous ids (sorted) followed
//! by human ids (sorted). Every stacked vector and block matrix in the crate
//! indexes nodes in this order.

use std::collections::{BTreeSet, HashMap, VecDeque};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Autonomous,
    Human,
}

/// Connected undirected graph, immutable after construction.
#[derive(Debug, Clone)]
pub struct NetworkTopology {
    ids: Vec<String>,
    autonomous: usize,
    index: HashMap<String, usize>,
    adjacency: Vec<Vec<usize>>,
    edges: BTreeSet<(usize, usize)>,
}

impl NetworkTopology {
    /// Builds and validates a topology. Fails on duplicate ids, self-loops,
    /// unknown endpoints, or a disconnected graph.
    pub fn new<S, I, J, E>(autonomous_ids: I, human_ids: J, edges: E) -> Result<Self>
    where
        S: AsRef<str>,
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = S>,
        E: IntoIterator<Item = (S, S)>,
    {
        let mut auto: Vec<String> = autonomous_ids
            .into_iter()
            .map(|s| s.as_ref().to_owned())
            .collect();
        let mut hum: Vec<String> = human_ids
            .into_iter()
            .map(|s| s.as_ref().to_owned())
            .collect();
        auto.sort();
        hum.sort();

        let autonomous = auto.len();
        let ids: Vec<String> = auto.into_iter().chain(hum).collect();
        if ids.is_empty() {
            return Err(Error::Schema("topology has no agents".into()));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }

        let mut edge_set = BTreeSet::new();
        for (a, b) in edges {
            let (a, b) = (a.as_ref(), b.as_ref());
            if a == b {
                return Err(Error::SelfLoop(a.to_owned()));
            }
            let ia = *index.get(a).ok_or_else(|| Error::UnknownId(a.to_owned()))?;
            let ib = *index.get(b).ok_or_else(|| Error::UnknownId(b.to_owned()))?;
            edge_set.insert((ia.min(ib), ia.max(ib)));
        }

        let mut adjacency = vec![Vec::new(); ids.len()];
        for &(a, b) in &edge_set {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }

        let topo = Self {
            ids,
            autonomous,
            index,
            adjacency,
            edges: edge_set,
        };
        topo.check_connected()?;
        Ok(topo)
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.ids.len();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &u in &self.adjacency[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(v) => Err(Error::Disconnected(self.ids[v].clone())),
            None => Ok(()),
        }
    }

    /// Number of autonomous agents (m).
    pub fn m(&self) -> usize {
        self.autonomous
    }

    /// Number of human agents (h).
    pub fn h(&self) -> usize {
        self.ids.len() - self.autonomous
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    /// All ids in canonical order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn autonomous_ids(&self) -> &[String] {
        &self.ids[..self.autonomous]
    }

    pub fn human_ids(&self) -> &[String] {
        &self.ids[self.autonomous..]
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownId(id.to_owned()))
    }

    pub fn id_at(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn kind_at(&self, index: usize) -> AgentKind {
        if index < self.autonomous {
            AgentKind::Autonomous
        } else {
            AgentKind::Human
        }
    }

    pub fn kind_of(&self, id: &str) -> Result<AgentKind> {
        self.index_of(id).map(|i| self.kind_at(i))
    }

    /// Canonical indices adjacent to `index`, ascending.
    pub fn neighbor_indices(&self, index: usize) -> &[usize] {
        &self.adjacency[index]
    }

    pub fn are_neighbors(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Edges as canonical index pairs `(lo, hi)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    /// Neighbors of `id` split into (autonomous, human), each in canonical order.
    pub fn neighbors(&self, id: &str) -> Result<(Vec<&str>, Vec<&str>)> {
        let v = self.index_of(id)?;
        let (auto, hum): (Vec<usize>, Vec<usize>) = self.adjacency[v]
            .iter()
            .partition(|&&u| u < self.autonomous);
        Ok((
            auto.into_iter().map(|u| self.ids[u].as_str()).collect(),
            hum.into_iter().map(|u| self.ids[u].as_str()).collect(),
        ))
    }

    /// Graph Laplacian `D - Adj` in canonical order.
    pub fn laplacian<T: Scalar>(&self) -> DMatrix<T> {
        let n = self.ids.len();
        let mut l = DMatrix::<T>::zeros(n, n);
        for &(a, b) in &self.edges {
            l[(a, b)] -= T::one();
            l[(b, a)] -= T::one();
            l[(a, a)] += T::one();
            l[(b, b)] += T::one();
        }
        l
    }
}

/// Kronecker lift `L ⊗ I_r`.
pub fn laplacian_lift<T: Scalar>(l: &DMatrix<T>, r: usize) -> Result<DMatrix<T>> {
    if r == 0 {
        return Err(Error::InvalidArgument("lift dimension r must be positive".into()));
    }
    if !l.is_square() {
        return Err(Error::InvalidArgument(format!(
            "laplacian must be square, got {}x{}",
            l.nrows(),
            l.ncols()
        )));
    }
    Ok(l.kronecker(&DMatrix::<T>::identity(r, r)))
}
