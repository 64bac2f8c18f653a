//! Session-based HTTP service: upload features once per image, then click.

pub mod api;
pub mod error;
pub mod session;
pub mod store;

use std::net::SocketAddr;

use cop_core::decode::DEFAULT_NMS_IOU;
use cop_core::fpr::ChainConfig;
use cop_harness::extract::ExtractCommand;
use serde::{Deserialize, Serialize};

pub use api::{router, AppState};
pub use error::{ApiError, ErrorBody};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Sessions kept before the least recently used is evicted.
    pub max_sessions: usize,
    pub max_upload_bytes: usize,
    /// Defaults for clicks; requests may override single fields.
    pub chain: ChainConfig,
    pub nms_iou: f64,
    /// Encoder run on uploads that carry an image but no features.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extract: Option<ExtractCommand>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_sessions: 32,
            max_upload_bytes: 1 << 30,
            chain: ChainConfig::default(),
            nms_iou: DEFAULT_NMS_IOU,
            extract: None,
        }
    }
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(AppState::new(config)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
