use rand_chacha::ChaCha8Rng;

use super::features::{self, AGENT_FEATURES, LANE_FEATURES};
use crate::error::Result;
use crate::math::nn::{Attention, Mlp};
use crate::math::{Graph, ParamSet, Tensor, Var};
use crate::scene::Scene;

/// History MLP, lanes-to-agents cross-attention, agents-to-agents
/// self-attention.
#[derive(Clone, Debug)]
pub struct SceneEncoder {
    pub dim: usize,
    agent_mlp: Mlp,
    lane_mlp: Mlp,
    lanes_to_agents: Attention,
    agents_to_agents: Attention,
}

impl SceneEncoder {
    pub fn new(ps: &mut ParamSet, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        SceneEncoder {
            dim,
            agent_mlp: Mlp::new(ps, "enc.agent", &[AGENT_FEATURES, dim, dim], true, rng),
            lane_mlp: Mlp::new(ps, "enc.lane", &[LANE_FEATURES, dim, dim], true, rng),
            lanes_to_agents: Attention::new(ps, "enc.l2a", dim, dim, rng),
            agents_to_agents: Attention::new(ps, "enc.a2a", dim, dim, rng),
        }
    }

    /// Lane features `[L, dim]`.
    pub fn lanes(&self, g: &mut Graph, ps: &ParamSet, scene: &Scene) -> Result<Var> {
        if scene.lanes.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[0, self.dim])));
        }
        let x = g.constant(features::lane_matrix(scene));
        self.lane_mlp.forward(g, ps, x)
    }

    /// Agent encodings `[A, dim]` (scene order) and lane features `[L, dim]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, scene: &Scene) -> Result<(Var, Var)> {
        let lanes = self.lanes(g, ps, scene)?;
        let x = g.constant(features::agent_matrix(scene));
        let h = self.agent_mlp.forward(g, ps, x)?;
        let h = self.lanes_to_agents.forward(g, ps, h, lanes)?;
        let h = self.agents_to_agents.forward(g, ps, h, h)?;
        Ok((h, lanes))
    }

    /// Forward pass without gradient bookkeeping, returning plain tensors.
    pub fn encode(&self, ps: &ParamSet, scene: &Scene) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let (a, l) = self.forward(&mut g, ps, scene)?;
        Ok((g.value(a).clone(), g.value(l).clone()))
    }
}
