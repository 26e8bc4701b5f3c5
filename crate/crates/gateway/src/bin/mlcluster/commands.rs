use std::io::Read as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mlcluster_core::domain::{
    parse_assignment, Checkpoint, Config, Dataset, LogLine, Memo, MetricEvent, Session, Submission,
    TelemetrySample, UserAccount, WorkloadProfile,
};
use mlcluster_core::session::automl::{SweepLaunch, SweepStatus};
use mlcluster_core::session::export::{ascii_chart, series, CheckpointManifest, SessionBundle};
use mlcluster_core::session::Leaderboard;
use mlcluster_core::sim::scenario::Scenario;
use mlcluster_gateway::api::{
    AggregateBody, Count, DiffBody, InferResponse, LoginResponse, StatusBody,
};
use mlcluster_gateway::GatewayConfig;
use serde_json::{json, Value};

use crate::client::{
    decode, forget_credentials, load_credentials, save_credentials, segment, Api, Credentials,
};
use crate::{
    AdminCommand, AutomlCommand, Cli, Command, DatasetCommand, EventArgs, RunArgs, UserCommand,
};

const DEFAULT_HOST: &str = "http://127.0.0.1:8470";

fn session_path(id: &str, tail: &str) -> String {
    format!("/v1/sessions/{}{tail}", segment(id))
}

fn config_from(args: &[String]) -> Result<Config> {
    let mut config = Config::new();
    for raw in args {
        let (k, v) = parse_assignment(raw)?;
        config.insert(k, v);
    }
    Ok(config)
}

/// Reads `file.json` (a profile) or `file.json#name` (a scenario workload).
pub fn load_workload(spec: &str) -> Result<WorkloadProfile> {
    let (path, name) = match spec.rsplit_once('#') {
        Some((p, n)) => (p, Some(n)),
        None => (spec, None),
    };
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
    if name.is_none() {
        if let Ok(profile) = serde_json::from_str::<WorkloadProfile>(&raw) {
            return Ok(profile);
        }
    }
    let scenario = Scenario::parse(raw.as_bytes())
        .with_context(|| format!("{path} is neither a workload nor a scenario"))?;
    match name {
        Some(n) => scenario
            .workloads
            .get(n)
            .cloned()
            .ok_or_else(|| anyhow!("{path} has no workload `{n}`")),
        None if scenario.workloads.len() == 1 => {
            Ok(scenario.workloads.into_values().next().unwrap())
        }
        None => bail!("{path} has several workloads; pick one with `{path}#name`"),
    }
}

fn event_query(f: &EventArgs) -> Vec<(&'static str, String)> {
    let mut q = Vec::new();
    if let Some(n) = &f.name {
        q.push(("name", n.clone()));
    }
    if let Some(s) = f.from_step {
        q.push(("from_step", s.to_string()));
    }
    if let Some(s) = f.to_step {
        q.push(("to_step", s.to_string()));
    }
    q
}

fn some_pairs(pairs: &[(&'static str, Option<String>)]) -> Vec<(&'static str, String)> {
    pairs
        .iter()
        .filter_map(|(k, v)| v.clone().map(|v| (*k, v)))
        .collect()
}

const NO_QUERY: &[(&str, &str)] = &[];

struct Out {
    json: bool,
}

impl Out {
    /// Prints the body verbatim under `--json`, otherwise the rendered text.
    fn show<T: serde::de::DeserializeOwned>(
        &self,
        body: &str,
        render: impl FnOnce(T) -> String,
    ) -> Result<()> {
        if self.json {
            print!("{body}");
        } else {
            print!("{}", render(decode(body)?));
        }
        Ok(())
    }
}

fn session_line(s: &Session) -> String {
    format!(
        "{:<28} {:<10} {:<10} {:>4} {:>8} {}\n",
        s.session_id,
        format!("{:?}", s.state),
        s.dataset_id,
        s.resources.gpus,
        s.progress_step,
        s.node_id.as_ref().map_or("-", |n| n.as_str()),
    )
}

fn pct(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

pub fn run(cli: Cli) -> Result<()> {
    let saved = load_credentials();
    let host = cli
        .host
        .clone()
        .or_else(|| saved.as_ref().map(|c| c.host.clone()))
        .unwrap_or_else(|| DEFAULT_HOST.into());
    let token = cli
        .token
        .clone()
        .or_else(|| saved.as_ref().map(|c| c.token.clone()));
    let out = Out { json: cli.json };

    if let Command::Server { config, overrides } = &cli.command {
        return server(config.as_deref(), overrides);
    }
    let api = Api::new(host.clone(), token)?;

    match cli.command {
        Command::Server { .. } => unreachable!(),
        Command::Login { token } => {
            let body = api.post("/v1/login", &json!({ "token": token }))?;
            let who: LoginResponse = decode(&body)?;
            save_credentials(&Credentials {
                host,
                token,
                user_id: who.user_id.to_string(),
            })?;
            out.show(&body, |w: LoginResponse| {
                format!("logged in as {} ({:?})\n", w.user_id, w.role)
            })
        }
        Command::Logout => {
            let body = api.post("/v1/logout", &json!({}))?;
            forget_credentials()?;
            out.show(&body, |_: Value| "logged out\n".into())
        }
        Command::Credit { grant: None } => {
            let body = api.get("/v1/users/me", NO_QUERY)?;
            out.show(&body, |u: UserAccount| {
                format!("{}: {} credits\n", u.user_id, u.credit_balance)
            })
        }
        Command::Credit { grant: Some(g) } => {
            let credit: u64 = g[1]
                .parse()
                .with_context(|| format!("bad credit `{}`", g[1]))?;
            let body = api.post(
                &format!("/v1/users/{}/credit", segment(&g[0])),
                &json!({ "credit": credit }),
            )?;
            out.show(&body, |u: UserAccount| {
                format!("{}: {} credits\n", u.user_id, u.credit_balance)
            })
        }
        Command::Run(args) => run_session(&api, &out, args),
        Command::Stop { session } => {
            let body = api.post(&session_path(&session, "/stop"), &json!({}))?;
            out.show(&body, |s: Session| {
                format!("{} {:?}\n", s.session_id, s.state)
            })
        }
        Command::Rm { session } => {
            let body = api.post(&session_path(&session, "/rm"), &json!({}))?;
            out.show(&body, |_: Value| format!("removed {session}\n"))
        }
        Command::Resume { session } => {
            let body = api.post(&session_path(&session, "/resume"), &json!({}))?;
            out.show(&body, |s: Session| {
                format!("{} {:?}\n", s.session_id, s.state)
            })
        }
        Command::Fork {
            session,
            args,
            seed,
        } => {
            let req = json!({ "overrides": config_from(&args)?, "seed": seed });
            let body = api.post(&session_path(&session, "/fork"), &req)?;
            out.show(&body, |s: Session| format!("{}\n", s.session_id))
        }
        Command::Ps {
            owner,
            state,
            dataset,
            limit,
            offset,
        } => {
            let q = some_pairs(&[
                ("owner", owner),
                ("state", state),
                ("dataset", dataset),
                ("limit", limit.map(|v| v.to_string())),
                ("offset", offset.map(|v| v.to_string())),
            ]);
            let body = api.get("/v1/sessions", &q)?;
            out.show(&body, |rows: Vec<Session>| {
                let mut s = format!(
                    "{:<28} {:<10} {:<10} {:>4} {:>8} {}\n",
                    "SESSION", "STATE", "DATASET", "GPUS", "STEP", "NODE"
                );
                rows.iter().for_each(|r| s.push_str(&session_line(r)));
                s
            })
        }
        Command::Logs { session, follow } => {
            let path = session_path(&session, "/logs");
            if follow {
                return api.stream(&path, &[("follow", "true")], |line| {
                    if out.json {
                        println!("{line}");
                    } else {
                        let l: LogLine = decode(line)?;
                        println!("[{}] {}", l.ts, l.line);
                    }
                    Ok(())
                });
            }
            let body = api.get(&path, NO_QUERY)?;
            out.show(&body, |lines: Vec<LogLine>| {
                lines
                    .iter()
                    .map(|l| format!("[{}] {}\n", l.ts, l.line))
                    .collect()
            })
        }
        Command::Getid { session } => {
            let body = api.get(&session_path(&session, ""), NO_QUERY)?;
            out.show(&body, |s: Session| format!("{}\n", s.session_id))
        }
        Command::Diff { session, others } => {
            let body = api.get(
                &session_path(&session, "/diff"),
                &[("other", others.join(","))],
            )?;
            out.show(&body, |d: DiffBody| {
                let mut s = String::new();
                for (k, v) in &d.comparison.common_args {
                    s.push_str(&format!("  {k}: {v}\n"));
                }
                d.lines.iter().for_each(|l| s.push_str(&format!("* {l}\n")));
                s
            })
        }
        Command::Download {
            session,
            checkpoint,
            output,
        } => {
            let body = api.get(
                &format!(
                    "{}/{}",
                    session_path(&session, "/checkpoints"),
                    segment(&checkpoint)
                ),
                NO_QUERY,
            )?;
            let ckpt: Checkpoint = decode(&body)?;
            let path = output.unwrap_or_else(|| {
                PathBuf::from(format!(
                    "{}.json",
                    ckpt.checkpoint_id.as_str().replace('/', "_")
                ))
            });
            std::fs::write(&path, &body).with_context(|| format!("writing {}", path.display()))?;
            out.show(&body, |c: Checkpoint| {
                format!(
                    "{} step {} -> {}\n",
                    c.checkpoint_id,
                    c.step,
                    path.display()
                )
            })
        }
        Command::Backup { session, output } => {
            let body = api.get(&session_path(&session, "/bundle"), NO_QUERY)?;
            let bundle: SessionBundle = decode(&body)?;
            let path = output
                .unwrap_or_else(|| PathBuf::from(format!("{}.tar", session.replace('/', "_"))));
            write_tar(&bundle, &path)?;
            out.show(&body, |_: Value| {
                format!("{session} -> {}\n", path.display())
            })
        }
        Command::Pull { session, output } => {
            let body = api.get(&session_path(&session, "/bundle"), NO_QUERY)?;
            let bundle: SessionBundle = decode(&body)?;
            let dir = output.unwrap_or_else(|| PathBuf::from(session.replace('/', "_")));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, bytes) in bundle.files() {
                std::fs::write(dir.join(&name), bytes)
                    .with_context(|| format!("writing {name}"))?;
            }
            out.show(&body, |_: Value| {
                format!("{session} -> {}/\n", dir.display())
            })
        }
        Command::Events {
            session,
            filter,
            follow,
        } => {
            let path = session_path(&session, "/events");
            let mut q = event_query(&filter);
            let render = |e: &MetricEvent| format!("{:>6} {:<12} {}\n", e.step, e.name, e.value);
            if follow {
                q.push(("follow", "true".into()));
                return api.stream(&path, &q, |line| {
                    if out.json {
                        println!("{line}");
                    } else {
                        print!("{}", render(&decode(line)?));
                    }
                    Ok(())
                });
            }
            let body = api.get(&path, &q)?;
            out.show(&body, |events: Vec<MetricEvent>| {
                events.iter().map(render).collect()
            })
        }
        Command::Eventlen { session, filter } => {
            let body = api.get(&session_path(&session, "/eventlen"), &event_query(&filter))?;
            out.show(&body, |c: Count| format!("{}\n", c.count))
        }
        Command::Memo { session, text } => {
            let body = api.post(&session_path(&session, "/memo"), &json!({ "text": text }))?;
            out.show(&body, |m: Memo| {
                format!("[{}] {}: {}\n", m.at, m.author, m.text)
            })
        }
        Command::Model { session } => {
            let body = api.get(&session_path(&session, "/checkpoints"), NO_QUERY)?;
            out.show(&body, |m: CheckpointManifest| {
                m.checkpoints
                    .iter()
                    .map(|c| {
                        format!(
                            "{:<36} step {:>6} value {:.6} {}\n",
                            c.checkpoint_id,
                            c.step,
                            c.value,
                            &c.digest[..12.min(c.digest.len())]
                        )
                    })
                    .collect()
            })
        }
        Command::Plot {
            session,
            filter,
            width,
            height,
        } => {
            let body = api.get(&session_path(&session, "/events"), &event_query(&filter))?;
            out.show(&body, |events: Vec<MetricEvent>| {
                series(&events)
                    .iter()
                    .map(|s| ascii_chart(s, width, height))
                    .collect()
            })
        }
        Command::Submit {
            session,
            checkpoint,
        } => {
            let body = api.post(
                &session_path(&session, "/submit"),
                &json!({ "checkpoint_id": checkpoint }),
            )?;
            out.show(&body, |s: Submission| {
                format!("{} {} = {}\n", s.submission_id, s.metric_name, s.score)
            })
        }
        Command::Serve {
            session,
            checkpoint,
        } => {
            let body = api.post(
                &session_path(&session, "/serve"),
                &json!({ "checkpoint_id": checkpoint }),
            )?;
            out.show(&body, |s: Session| {
                format!(
                    "{} {:?} {}\n",
                    s.session_id,
                    s.state,
                    s.serving_checkpoint.as_ref().map_or("-", |c| c.as_str())
                )
            })
        }
        Command::Infer { session, payload } => {
            let raw = match payload {
                Some(p) => p,
                None => {
                    let mut s = String::new();
                    std::io::stdin().read_to_string(&mut s)?;
                    s
                }
            };
            let payload: Value = serde_json::from_str(&raw).context("payload is not JSON")?;
            let body = api.post(&session_path(&session, "/infer"), &payload)?;
            out.show(&body, |r: InferResponse| {
                format!(
                    "label {} (p={:.4}) in {} ms\n",
                    r.output.label,
                    r.output
                        .probabilities
                        .get(r.output.label)
                        .copied()
                        .unwrap_or(0.0),
                    r.latency_ms
                )
            })
        }
        Command::Leaderboard { dataset } => {
            let body = api.get(&format!("/v1/leaderboard/{}", segment(&dataset)), NO_QUERY)?;
            out.show(&body, |lb: Leaderboard| {
                let mut s = format!("{} ({}, {:?})\n", lb.dataset_id, lb.metric_name, lb.order);
                for e in &lb.entries {
                    s.push_str(&format!(
                        "{:>3}. {:<12} {:<12} {}\n",
                        e.rank, e.user_id, e.score, e.session_id
                    ));
                }
                s
            })
        }
        Command::Dataset(DatasetCommand::Push {
            dataset,
            size,
            team,
            metric,
            path,
        }) => {
            let visibility = match team {
                Some(t) => json!({ "kind": "team_private", "team": t }),
                None => json!({ "kind": "public" }),
            };
            let evaluation = metric.map(|m| {
                let order = mlcluster_core::domain::ScoreOrder::for_metric(&m);
                json!({ "metric_name": m, "order": order })
            });
            let req = json!({
                "dataset_id": dataset,
                "size": size,
                "visibility": visibility,
                "evaluation": evaluation,
                "path": path,
            });
            let body = api.post("/v1/datasets", &req)?;
            out.show(&body, |d: Dataset| {
                format!("{} ({} bytes)\n", d.dataset_id, d.size)
            })
        }
        Command::Dataset(DatasetCommand::List) => {
            let body = api.get("/v1/datasets", NO_QUERY)?;
            out.show(&body, |ds: Vec<Dataset>| {
                ds.iter()
                    .map(|d| {
                        format!(
                            "{:<16} {:<10} {:>14} {:?}\n",
                            d.dataset_id, d.owner, d.size, d.visibility
                        )
                    })
                    .collect()
            })
        }
        Command::Gpustat { window, from, to } => {
            let q = some_pairs(&[
                ("window", window.map(|v| v.to_string())),
                ("from", from.map(|v| v.to_string())),
                ("to", to.map(|v| v.to_string())),
            ]);
            let body = api.get("/v1/telemetry/aggregate", &q)?;
            out.show(&body, |a: AggregateBody| {
                format!(
                    "window [{}, {}) {} gpus, {} samples\nrunning {}\nover 80% {}\n",
                    a.from,
                    a.to,
                    a.summary.gpus,
                    a.summary.samples,
                    pct(a.summary.running_ratio),
                    pct(a.summary.over80_ratio)
                )
            })
        }
        Command::Gpumonitor => {
            let body = api.get("/v1/telemetry/nodes", NO_QUERY)?;
            out.show(&body, |samples: Vec<TelemetrySample>| {
                samples
                    .iter()
                    .map(|t| {
                        format!(
                            "{:<8} gpu{:<2} {:>5.1}% {:>12} {}\n",
                            t.node_id,
                            t.gpu_index,
                            t.utilization_pct,
                            t.memory_used,
                            t.session_id.as_ref().map_or("-", |s| s.as_str())
                        )
                    })
                    .collect()
            })
        }
        Command::Status => {
            let body = api.get("/v1/status", NO_QUERY)?;
            out.show(&body, |s: StatusBody| {
                let mut o = format!(
                    "epoch {} primary {} queue {} now {}\n",
                    s.scheduler_epoch,
                    s.primary.map_or("-".into(), |p| p.to_string()),
                    s.queue_depth,
                    s.now
                );
                for n in &s.nodes {
                    o.push_str(&format!(
                        "{:<8} {:<5} {}/{} gpus {}/{} mem\n",
                        n.node_id,
                        if n.alive { "up" } else { "down" },
                        n.available_gpus,
                        n.total_gpus,
                        n.available_memory,
                        n.total_memory
                    ));
                }
                o
            })
        }
        Command::Automl(AutomlCommand::Run { file }) => {
            let raw = std::fs::read_to_string(&file)
                .with_context(|| format!("reading {}", file.display()))?;
            let req: Value = serde_json::from_str(&raw).context("sweep file is not JSON")?;
            let body = api.post("/v1/sweeps", &req)?;
            out.show(&body, |l: SweepLaunch| {
                let mut s = format!("{}\n", l.sweep_id);
                l.sessions
                    .iter()
                    .for_each(|id| s.push_str(&format!("  {id}\n")));
                s
            })
        }
        Command::Automl(AutomlCommand::Status { sweep }) => {
            let body = api.get(&format!("/v1/sweeps/{}", segment(&sweep)), NO_QUERY)?;
            out.show(&body, |st: SweepStatus| {
                let mut s = String::new();
                for m in &st.members {
                    s.push_str(&format!(
                        "{:<28} {:<10} {:>6} {}\n",
                        m.session_id,
                        m.state.map_or("-".into(), |x| format!("{x:?}")),
                        m.progress_step,
                        m.score.map_or("-".into(), |v| v.to_string())
                    ));
                }
                if let Some((id, score)) = &st.best {
                    s.push_str(&format!("best {id} {score}\n"));
                }
                s
            })
        }
        Command::User(UserCommand::Add {
            user,
            role,
            credit,
            team,
        }) => {
            let req = json!({ "user_id": user, "role": role, "credit": credit, "teams": team });
            let body = api.post("/v1/users", &req)?;
            out.show(&body, |u: UserAccount| {
                format!("{} {:?} {} credits\n", u.user_id, u.role, u.credit_balance)
            })
        }
        Command::Admin(AdminCommand::Advance { ms }) => {
            let body = api.post("/v1/admin/advance", &json!({ "ms": ms }))?;
            out.show(&body, |v: Value| format!("now {}\n", v["now"]))
        }
        Command::Admin(AdminCommand::Fault { spec }) => {
            let spec: Value = serde_json::from_str(&spec).context("fault spec is not JSON")?;
            let body = api.post("/v1/admin/faults", &spec)?;
            out.show(&body, |v: Value| format!("{v}\n"))
        }
        Command::Admin(AdminCommand::Audit) => {
            let body = api.get("/v1/admin/audit", NO_QUERY)?;
            out.show(&body, |v: Value| {
                format!("{}\n", serde_json::to_string_pretty(&v).unwrap_or_default())
            })
        }
    }
}

fn run_session(api: &Api, out: &Out, args: RunArgs) -> Result<()> {
    let profile = load_workload(&args.workload)?;
    let memory = args.memory.unwrap_or(profile.peak_memory);
    let req = json!({
        "dataset_id": args.dataset,
        "image_id": args.image,
        "config": config_from(&args.args)?,
        "gpus": args.gpus,
        "memory": memory,
        "profile": profile,
        "seed": args.seed,
        "team": args.team,
    });
    let body = api.post("/v1/sessions", &req)?;
    out.show(&body, |s: Session| format!("{}\n", s.session_id))
}

fn write_tar(bundle: &SessionBundle, path: &Path) -> Result<()> {
    let file =
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut tar = tar::Builder::new(file);
    let root = bundle.session.session_id.as_str().replace('/', "_");
    for (name, bytes) in bundle.files() {
        let mut header = tar::Header::new_gnu();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_cksum();
        tar.append_data(&mut header, format!("{root}/{name}"), bytes.as_slice())?;
    }
    tar.into_inner()?;
    Ok(())
}

fn server(config: Option<&Path>, overrides: &[String]) -> Result<()> {
    let mut cfg = match config {
        Some(p) => GatewayConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => GatewayConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    mlcluster_gateway::serve_blocking(cfg)?;
    Ok(())
}
