//! Weighted pool of gateways. Each work item is assigned to one member by a
//! weighted choice seeded from the item key, so assignment is reproducible
//! without any global coordination.

use std::sync::Arc;

use rand::Rng;

use super::{Gateway, LlmError};
use crate::text::item_rng;

pub struct PoolMember {
    pub weight: f64,
    pub gateway: Arc<Gateway>,
}

pub struct ModelPool {
    members: Vec<PoolMember>,
    seed: u64,
}

impl ModelPool {
    pub fn new(members: Vec<PoolMember>, seed: u64) -> Result<Self, LlmError> {
        if members.is_empty() {
            return Err(LlmError::Config("model pool is empty".into()));
        }
        let total: f64 = members.iter().map(|m| m.weight).sum();
        if members.iter().any(|m| !(m.weight > 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(LlmError::Config(format!(
                "pool weights must be positive and sum to 1 (sum = {total})"
            )));
        }
        Ok(Self { members, seed })
    }

    pub fn single(gateway: Arc<Gateway>) -> Self {
        Self {
            members: vec![PoolMember {
                weight: 1.0,
                gateway,
            }],
            seed: 0,
        }
    }

    pub fn pick(&self, item_key: &str) -> &Gateway {
        if self.members.len() == 1 {
            return &self.members[0].gateway;
        }
        let draw: f64 = item_rng(self.seed, &format!("pool:{item_key}")).random();
        let mut acc = 0.0;
        for m in &self.members {
            acc += m.weight;
            if draw < acc {
                return &m.gateway;
            }
        }
        &self.members[self.members.len() - 1].gateway
    }

    pub fn members(&self) -> &[PoolMember] {
        &self.members
    }
}
