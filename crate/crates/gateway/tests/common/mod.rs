#![allow(dead_code)]

use std::path::Path;
use std::process::Output;

use mlcluster_core::domain::{Evaluation, Role, UserAccount, Visibility, WorkloadProfile, GIB};
use mlcluster_core::registry::DatasetPush;
use mlcluster_core::sim::fixtures::{profile, user, ADMIN, ALICE, BOB, FACES, MNIST, VISION};
use mlcluster_core::sim::scenario::{DatasetSpec, NodeSpec};
use mlcluster_gateway::{Gateway, GatewayConfig};
use reqwest::blocking::{Client, RequestBuilder};
use serde_json::Value;

pub const ROOT_TOKEN: &str = "tok-root";
pub const ALICE_TOKEN: &str = "tok-alice";
pub const BOB_TOKEN: &str = "tok-bob";

/// Four 8-GPU nodes, two datasets, three accounts and a manual clock.
pub fn config() -> GatewayConfig {
    let mut c = GatewayConfig {
        bind: "127.0.0.1:0".into(),
        ..GatewayConfig::default()
    };
    c.clock.speed = 0.0;
    for (token, who) in [(ROOT_TOKEN, ADMIN), (ALICE_TOKEN, ALICE), (BOB_TOKEN, BOB)] {
        c.tokens.insert(token.into(), user(who));
    }
    c.users
        .push(UserAccount::new(user(ADMIN), Role::Admin, 1_000_000));
    let mut alice = UserAccount::new(user(ALICE), Role::User, 1_000_000);
    alice.teams.insert(VISION.into());
    c.users.push(alice);
    c.users
        .push(UserAccount::new(user(BOB), Role::User, 1_000_000));
    for i in 1..=4 {
        c.nodes.push(NodeSpec {
            node_id: format!("node-{i}").into(),
            gpus: 8,
            memory: 64 * GIB,
        });
    }
    c.datasets.push(DatasetSpec {
        owner: user(ALICE),
        push: DatasetPush {
            dataset_id: MNIST.into(),
            size: GIB,
            visibility: Visibility::Public,
            evaluation: Some(Evaluation::named("accuracy")),
            path: None,
        },
    });
    c.datasets.push(DatasetSpec {
        owner: user(ALICE),
        push: DatasetPush {
            dataset_id: FACES.into(),
            size: 2 * GIB,
            visibility: Visibility::TeamPrivate(VISION.into()),
            evaluation: Some(Evaluation::named("mse")),
            path: None,
        },
    });
    c
}

pub fn start() -> Gateway {
    Gateway::start(config()).expect("gateway starts")
}

pub struct Http {
    pub base: String,
    client: Client,
}

pub struct Reply {
    pub status: u16,
    pub body: String,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.body).unwrap_or_else(|e| panic!("{e}: {}", self.body))
    }
}

impl Http {
    pub fn new(gw: &Gateway) -> Self {
        Self {
            base: gw.url(),
            client: Client::new(),
        }
    }

    fn send(&self, req: RequestBuilder, token: Option<&str>) -> Reply {
        let req = match token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req.send().expect("request sent");
        Reply {
            status: resp.status().as_u16(),
            body: resp.text().expect("body"),
        }
    }

    pub fn get(&self, path: &str, token: Option<&str>) -> Reply {
        self.send(self.client.get(format!("{}{path}", self.base)), token)
    }

    pub fn post(&self, path: &str, token: Option<&str>, body: &Value) -> Reply {
        self.send(
            self.client.post(format!("{}{path}", self.base)).json(body),
            token,
        )
    }
}

pub fn enc(id: &str) -> String {
    id.replace('/', "%2F")
}

pub fn run_body(
    dataset: &str,
    gpus: u32,
    profile: &WorkloadProfile,
    args: &[(&str, f64)],
) -> Value {
    let config: serde_json::Map<String, Value> = args
        .iter()
        .map(|(k, v)| ((*k).to_owned(), Value::from(*v)))
        .collect();
    serde_json::json!({
        "dataset_id": dataset,
        "image_id": "pytorch-1.0",
        "config": config,
        "gpus": gpus,
        "memory": 4 * GIB,
        "profile": profile,
    })
}

pub fn quick(steps: u64) -> WorkloadProfile {
    profile(steps)
}

/// Starts a session and returns its id.
pub fn run(
    http: &Http,
    token: &str,
    dataset: &str,
    gpus: u32,
    steps: u64,
    args: &[(&str, f64)],
) -> String {
    let r = http.post(
        "/v1/sessions",
        Some(token),
        &run_body(dataset, gpus, &quick(steps), args),
    );
    assert_eq!(r.status, 201, "{}", r.body);
    r.json()["session_id"].as_str().unwrap().to_owned()
}

pub fn advance(gw: &Gateway, ms: u64) {
    gw.cluster().advance(ms).expect("simulation advances");
}

pub fn state_of(http: &Http, token: &str, sid: &str) -> String {
    let r = http.get(&format!("/v1/sessions/{}", enc(sid)), Some(token));
    assert_eq!(r.status, 200, "{}", r.body);
    r.json()["state"].as_str().unwrap().to_owned()
}

/// Runs the CLI against the gateway with its own config home.
pub fn cli(gw: &Gateway, home: &Path, token: Option<&str>, args: &[&str]) -> Output {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_mlcluster"));
    cmd.args(args)
        .env("NSML_HOST", gw.url())
        .env("MLCLUSTER_HOME", home)
        .env_remove("NSML_TOKEN")
        .env("RUST_LOG", "warn");
    if let Some(t) = token {
        cmd.env("NSML_TOKEN", t);
    }
    cmd.output().expect("cli runs")
}

pub fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "cli failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}
