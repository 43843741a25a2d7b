#![allow(dead_code)]

use std::sync::Arc;

use docrag::environment::{Environment, SessionConfig};
use docrag::grpo::{generate_micro_world, MicroWorld};
use docrag::harness::service::{serve, ServiceState};
use docrag::harness::ImageMode;
use docrag::{BuiltinJudge, RewardWeights};

pub fn world(seed: u64, docs: usize, queries: usize) -> Arc<MicroWorld> {
    Arc::new(generate_micro_world(seed, docs, queries))
}

pub fn env_of(world: &MicroWorld, t_max: usize) -> Environment {
    world
        .environment(SessionConfig {
            t_max,
            ..SessionConfig::default()
        })
        .unwrap()
}

/// A service bound to an ephemeral local port, alive while this value is.
pub struct Server {
    pub base: String,
    agent: ureq::Agent,
    _rt: tokio::runtime::Runtime,
}

pub fn spawn(world: &MicroWorld, t_max: usize) -> Server {
    let state = ServiceState::new(
        env_of(world, t_max),
        world.queries.clone(),
        Arc::new(BuiltinJudge),
        RewardWeights::default(),
        ImageMode::Base64,
    );
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    let listener = rt
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(serve(Arc::new(state), listener));
    let agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    Server {
        base: format!("http://{addr}"),
        agent,
        _rt: rt,
    }
}

impl Server {
    /// Status and raw body of a JSON POST.
    pub fn post(&self, path: &str, body: &str) -> (u16, String) {
        let mut resp = self
            .agent
            .post(format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .send(body)
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_to_string().unwrap())
    }

    pub fn get(&self, path: &str) -> (u16, String) {
        let mut resp = self
            .agent
            .get(format!("{}{path}", self.base))
            .call()
            .unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_to_string().unwrap())
    }

    pub fn delete(&self, path: &str) -> u16 {
        self.agent
            .delete(format!("{}{path}", self.base))
            .call()
            .unwrap()
            .status()
            .as_u16()
    }
}
