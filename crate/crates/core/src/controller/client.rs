use std::net::Ipv4Addr;
use std::time::Duration;

use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    CacheLocation, ContentMetadata, ControllerError, SessionId, SharedController, StorageCapability,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("controller unreachable: {0}")]
    Unreachable(String),
    #[error("controller answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error("bad controller response: {0}")]
    Decode(String),
    #[error(transparent)]
    Rejected(#[from] ControllerError),
}

/// What the proxy and the cache need from the controller.
pub trait ControllerClient: Send + Sync {
    fn lookup_content(&self, file_name: &str) -> Result<Option<CacheLocation>, ClientError>;
    fn report_metadata(&self, meta: &ContentMetadata) -> Result<(), ClientError>;
    fn cache_query(&self, source_ip: Ipv4Addr) -> Result<Option<String>, ClientError>;
    fn register_storage(&self, capability: &StorageCapability) -> Result<SessionId, ClientError>;
    fn heartbeat(&self, session: SessionId) -> Result<(), ClientError>;
    fn report_stats(&self, stats: &StatsReport) -> Result<(), ClientError>;
    fn confirm_stored(&self, session: SessionId, file_name: &str) -> Result<(), ClientError>;
    fn deregister_storage(&self, session: SessionId) -> Result<(), ClientError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub session_id: SessionId,
    pub used_bytes: u64,
    pub object_count: u64,
    /// Names dropped by the cache since its last report.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evicted: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct SessionBody {
    pub session_id: SessionId,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ConfirmBody {
    pub session_id: SessionId,
    pub file_name: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct PendingBody {
    pub file_name: String,
}

impl ControllerClient for SharedController {
    fn lookup_content(&self, file_name: &str) -> Result<Option<CacheLocation>, ClientError> {
        Ok(self.lock().unwrap().lookup_content(file_name))
    }

    fn report_metadata(&self, meta: &ContentMetadata) -> Result<(), ClientError> {
        self.lock().unwrap().report_metadata(meta)?;
        Ok(())
    }

    fn cache_query(&self, source_ip: Ipv4Addr) -> Result<Option<String>, ClientError> {
        Ok(self.lock().unwrap().cache_query(source_ip))
    }

    fn register_storage(&self, capability: &StorageCapability) -> Result<SessionId, ClientError> {
        Ok(self.lock().unwrap().register_storage(capability.clone())?)
    }

    fn heartbeat(&self, session: SessionId) -> Result<(), ClientError> {
        Ok(self.lock().unwrap().heartbeat(session)?)
    }

    fn report_stats(&self, s: &StatsReport) -> Result<(), ClientError> {
        Ok(self.lock().unwrap().report_stats(
            s.session_id,
            s.used_bytes,
            s.object_count,
            &s.evicted,
        )?)
    }

    fn confirm_stored(&self, session: SessionId, file_name: &str) -> Result<(), ClientError> {
        Ok(self.lock().unwrap().confirm_stored(session, file_name)?)
    }

    fn deregister_storage(&self, session: SessionId) -> Result<(), ClientError> {
        Ok(self.lock().unwrap().deregister_storage(session)?)
    }
}

/// Talks to a controller's HTTP/JSON API.
#[derive(Debug, Clone)]
pub struct HttpControllerClient {
    base: String,
    agent: ureq::Agent,
}

impl HttpControllerClient {
    pub fn new(base_url: &str) -> Self {
        Self::with_timeout(base_url, Duration::from_secs(5))
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpControllerClient {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn finish(
        &self,
        result: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<Reply, ClientError> {
        let mut resp = result.map_err(|e| ClientError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::Unreachable(e.to_string()))?;
        Ok(Reply { status, body })
    }

    fn get(&self, path: &str) -> Result<Reply, ClientError> {
        self.finish(self.agent.get(&self.url(path)).call())
    }

    fn post<T: Serialize>(&self, path: &str, body: &T) -> Result<Reply, ClientError> {
        self.finish(self.agent.post(&self.url(path)).send_json(body))
    }
}

struct Reply {
    status: u16,
    body: String,
}

impl Reply {
    fn expect(self, status: u16) -> Result<Reply, ClientError> {
        if self.status == status {
            Ok(self)
        } else {
            Err(ClientError::Status {
                status: self.status,
                body: self.body,
            })
        }
    }

    fn json<T: DeserializeOwned>(&self) -> Result<T, ClientError> {
        serde_json::from_str(&self.body).map_err(|e| ClientError::Decode(e.to_string()))
    }

    /// 200 → decoded body, 404 → `None`.
    fn optional<T: DeserializeOwned>(self) -> Result<Option<T>, ClientError> {
        match self.status {
            404 => Ok(None),
            200 => self.json().map(Some),
            _ => Err(ClientError::Status {
                status: self.status,
                body: self.body,
            }),
        }
    }
}

impl ControllerClient for HttpControllerClient {
    fn lookup_content(&self, file_name: &str) -> Result<Option<CacheLocation>, ClientError> {
        let name = utf8_percent_encode(file_name, NON_ALPHANUMERIC);
        self.get(&format!("/content?name={name}"))?.optional()
    }

    fn report_metadata(&self, meta: &ContentMetadata) -> Result<(), ClientError> {
        self.post("/metadata", meta)?.expect(204).map(|_| ())
    }

    fn cache_query(&self, source_ip: Ipv4Addr) -> Result<Option<String>, ClientError> {
        Ok(self
            .get(&format!("/pending?source_ip={source_ip}"))?
            .optional::<PendingBody>()?
            .map(|p| p.file_name))
    }

    fn register_storage(&self, capability: &StorageCapability) -> Result<SessionId, ClientError> {
        let reply = self.post("/storage/register", capability)?.expect(200)?;
        Ok(reply.json::<SessionBody>()?.session_id)
    }

    fn heartbeat(&self, session: SessionId) -> Result<(), ClientError> {
        self.post(
            "/storage/heartbeat",
            &SessionBody {
                session_id: session,
            },
        )?
        .expect(204)
        .map(|_| ())
    }

    fn report_stats(&self, stats: &StatsReport) -> Result<(), ClientError> {
        self.post("/storage/stats", stats)?.expect(204).map(|_| ())
    }

    fn confirm_stored(&self, session: SessionId, file_name: &str) -> Result<(), ClientError> {
        let body = ConfirmBody {
            session_id: session,
            file_name: file_name.to_string(),
        };
        self.post("/storage/confirm", &body)?
            .expect(204)
            .map(|_| ())
    }

    fn deregister_storage(&self, session: SessionId) -> Result<(), ClientError> {
        let url = self.url(&format!("/storage/session/{session}"));
        self.finish(self.agent.delete(&url).call())?
            .expect(204)
            .map(|_| ())
    }
}
