use lwise_core::curriculum::Variant;
use lwise_core::expserve::{Feedback, NextTrial, ResponseRequest};
use lwise_core::simlearner::SessionDriver;
use lwise_core::{Error, Result};
use reqwest::blocking::{Client, Response};

use crate::{CreateSession, ErrorBody, SessionCreated};

/// Takes sessions through the HTTP API.
pub struct HttpDriver {
    base: String,
    client: Client,
}

impl HttpDriver {
    pub fn new(base_url: &str) -> Self {
        HttpDriver {
            base: base_url.trim_end_matches('/').to_string(),
            client: Client::new(),
        }
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }
}

fn transport(e: reqwest::Error) -> Error {
    Error::Remote {
        status: e.status().map_or(0, |s| s.as_u16()),
        kind: "transport".into(),
        message: e.to_string(),
    }
}

fn checked(resp: Response) -> Result<Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let code = status.as_u16();
    let body: Option<ErrorBody> = resp.json().ok();
    Err(Error::Remote {
        status: code,
        kind: body.as_ref().map_or_else(|| "unknown".into(), |b| b.error.clone()),
        message: body.map_or_else(String::new, |b| b.message),
    })
}

impl SessionDriver for HttpDriver {
    fn create(&mut self, participant_id: &str, variant: Option<Variant>) -> Result<String> {
        let resp = self
            .client
            .post(self.url("/v1/sessions"))
            .json(&CreateSession {
                participant_id: participant_id.to_string(),
                variant,
            })
            .send()
            .map_err(transport)?;
        let created: SessionCreated = checked(resp)?.json().map_err(transport)?;
        Ok(created.session_id)
    }

    fn next_trial(&mut self, session_id: &str) -> Result<NextTrial> {
        let resp = self
            .client
            .get(self.url(&format!("/v1/sessions/{session_id}/trial")))
            .send()
            .map_err(transport)?;
        checked(resp)?.json().map_err(transport)
    }

    fn submit(&mut self, session_id: &str, response: &ResponseRequest) -> Result<Feedback> {
        let resp = self
            .client
            .post(self.url(&format!("/v1/sessions/{session_id}/response")))
            .json(response)
            .send()
            .map_err(transport)?;
        checked(resp)?.json().map_err(transport)
    }

    fn fetch_image(&mut self, url: &str) -> Result<Vec<u8>> {
        let full = if url.starts_with("http") {
            url.to_string()
        } else {
            self.url(url)
        };
        let resp = self.client.get(full).send().map_err(transport)?;
        Ok(checked(resp)?.bytes().map_err(transport)?.to_vec())
    }
}
