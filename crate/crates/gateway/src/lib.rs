//! HTTP gateway over a simulated cluster: the `/v1` JSON API, its
//! configuration, and an embeddable server handle.

pub mod api;
pub mod cluster;
pub mod config;
pub mod webhook;

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use thiserror::Error;
use tokio::sync::oneshot;

pub use cluster::{Cluster, Driver};
pub use config::{ConfigError, GatewayConfig};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("cannot boot cluster: {0}")]
    Boot(#[from] mlcluster_core::Error),

    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },

    #[error("server failed: {0}")]
    Io(#[from] std::io::Error),
}

/// A running gateway on its own runtime thread; shuts down when dropped.
pub struct Gateway {
    addr: SocketAddr,
    cluster: Arc<Cluster>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<Result<(), GatewayError>>>,
    driver: Option<Driver>,
}

impl Gateway {
    pub fn start(config: GatewayConfig) -> Result<Self, GatewayError> {
        let listener = bind(&config.bind)?;
        let addr = listener.local_addr()?;
        let cluster = Cluster::boot(config)?;
        let driver = Driver::spawn(cluster.clone());
        let (tx, rx) = oneshot::channel::<()>();
        let app = api::router(cluster.clone());
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await?;
                Ok(())
            })
        });
        Ok(Self {
            addr,
            cluster,
            shutdown: Some(tx),
            thread: Some(thread),
            driver,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn cluster(&self) -> &Arc<Cluster> {
        &self.cluster
    }

    pub fn shutdown(mut self) -> Result<(), GatewayError> {
        self.stop()
    }

    fn stop(&mut self) -> Result<(), GatewayError> {
        self.driver.take();
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or(Ok(())),
            None => Ok(()),
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

fn bind(addr: &str) -> Result<std::net::TcpListener, GatewayError> {
    let listener = std::net::TcpListener::bind(addr).map_err(|source| GatewayError::Bind {
        addr: addr.into(),
        source,
    })?;
    listener.set_nonblocking(true)?;
    Ok(listener)
}

/// Runs the gateway on the current thread until ctrl-c.
pub fn serve_blocking(config: GatewayConfig) -> Result<(), GatewayError> {
    let listener = bind(&config.bind)?;
    let cluster = Cluster::boot(config)?;
    let _driver = Driver::spawn(cluster.clone());
    let app = api::router(cluster);
    tracing::info!(addr = %listener.local_addr()?, "gateway listening");
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}
