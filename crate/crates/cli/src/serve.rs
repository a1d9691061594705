//! `talkedit serve`

use std::path::Path;
use std::sync::Arc;

use talkedit_service::{serve, Service, SessionStore};

use crate::artifacts;
use crate::{CliError, ServeArgs};

pub(crate) fn run(home: &Path, a: &ServeArgs) -> Result<(), CliError> {
    let world = artifacts::load_world(a.common.backend_config.as_deref())?;
    // Without models the API still answers, with service_unavailable.
    let models =
        match artifacts::load_dialog_models(home, a.common.seed, world, a.traversal.field_config())
        {
            Ok(m) => Some(Arc::new(m)),
            Err(CliError::MissingCheckpoint(p)) => {
                log::warn!("no checkpoint at {}; serving without models", p.display());
                None
            }
            Err(e) => return Err(e),
        };
    let sessions = a.sessions.clone().unwrap_or_else(|| home.join("sessions"));
    let service = Arc::new(Service::open(models, SessionStore::open(&sessions)?)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        log::info!(
            "listening on http://{} with sessions in {}",
            listener.local_addr()?,
            sessions.display()
        );
        // Scripts read this line to find an ephemeral port.
        println!("listening on {}", listener.local_addr()?);
        serve(listener, service).await
    })?;
    Ok(())
}
