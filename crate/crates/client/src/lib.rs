//! Async client for the boxforge review service.

use boxforge_core::api::{
    ErrorBody, ExportRequest, ItemPage, ItemView, ItemsQuery, QueueOverview, MAX_PAGE_LIMIT,
};
use boxforge_core::review::{Decision, DecisionRequest, ExportReport, ReviewState};
use reqwest::{Method, Response, Url};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid service url `{0}`")]
    BadUrl(String),
    #[error(transparent)]
    Http(#[from] reqwest::Error),
    /// The service answered with a non-2xx status.
    #[error("{status}: {message}")]
    Api {
        status: u16,
        message: String,
        pending: Option<usize>,
    },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Http(e) => e.status().map(|s| s.as_u16()),
            ClientError::BadUrl(_) => None,
        }
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct ReviewClient {
    base: Url,
    http: reqwest::Client,
}

/// Raster bytes and the content type the service reported.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBytes {
    pub content_type: Option<String>,
    pub bytes: Vec<u8>,
}

fn state_name(s: ReviewState) -> &'static str {
    match s {
        ReviewState::Pending => "pending",
        ReviewState::Accepted => "accepted",
        ReviewState::Edited => "edited",
        ReviewState::Rejected => "rejected",
    }
}

impl ReviewClient {
    /// `base_url` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base_url: &str) -> Result<Self> {
        let base = Url::parse(base_url).map_err(|_| ClientError::BadUrl(base_url.to_string()))?;
        if base.cannot_be_a_base() {
            return Err(ClientError::BadUrl(base_url.to_string()));
        }
        Ok(ReviewClient {
            base,
            http: reqwest::Client::new(),
        })
    }

    /// Builds `<base>/api/<segments...>`, percent-encoding each segment.
    fn url<'a>(&self, segments: impl IntoIterator<Item = &'a str>) -> Url {
        let mut url = self.base.clone();
        url.path_segments_mut()
            .expect("base url checked in new")
            .pop_if_empty()
            .push("api")
            .extend(segments);
        url
    }

    async fn send<B: Serialize>(
        &self,
        method: Method,
        url: Url,
        body: Option<&B>,
    ) -> Result<Response> {
        let mut req = self.http.request(method, url);
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let text = resp.text().await.unwrap_or_default();
        let (message, pending) = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => (b.error, b.pending),
            Err(_) => (text, None),
        };
        Err(ClientError::Api {
            status,
            message,
            pending,
        })
    }

    async fn json<T: DeserializeOwned, B: Serialize>(
        &self,
        method: Method,
        url: Url,
        body: Option<&B>,
    ) -> Result<T> {
        Ok(self.send(method, url, body).await?.json().await?)
    }

    pub async fn queue(&self) -> Result<QueueOverview> {
        self.json(Method::GET, self.url(["queue"]), None::<&()>)
            .await
    }

    pub async fn items(&self, query: ItemsQuery) -> Result<ItemPage> {
        let mut url = self.url(["items"]);
        {
            let mut pairs = url.query_pairs_mut();
            if let Some(s) = query.state {
                pairs.append_pair("state", state_name(s));
            }
            if let Some(o) = query.offset {
                pairs.append_pair("offset", &o.to_string());
            }
            if let Some(l) = query.limit {
                pairs.append_pair("limit", &l.to_string());
            }
        }
        if url.query() == Some("") {
            url.set_query(None);
        }
        self.json(Method::GET, url, None::<&()>).await
    }

    /// Every item in the given state, fetched page by page.
    pub async fn all_items(&self, state: Option<ReviewState>) -> Result<Vec<ItemView>> {
        let mut out = Vec::new();
        loop {
            let page = self
                .items(ItemsQuery {
                    state,
                    offset: Some(out.len()),
                    limit: Some(MAX_PAGE_LIMIT),
                })
                .await?;
            let done = page.items.is_empty() || out.len() + page.items.len() >= page.total;
            out.extend(page.items);
            if done {
                return Ok(out);
            }
        }
    }

    pub async fn item(&self, item_id: &str) -> Result<ItemView> {
        self.json(Method::GET, self.url(["items", item_id]), None::<&()>)
            .await
    }

    pub async fn decide(&self, item_id: &str, decision: Decision) -> Result<ItemView> {
        self.decide_raw(item_id, &DecisionRequest::new(decision))
            .await
    }

    /// Sends a decision body as is, e.g. an edit without a class id.
    pub async fn decide_raw(&self, item_id: &str, request: &DecisionRequest) -> Result<ItemView> {
        let url = self.url(["items", item_id, "decision"]);
        self.json(Method::POST, url, Some(request)).await
    }

    pub async fn image(&self, image_id: &str) -> Result<ImageBytes> {
        let url = self.url(std::iter::once("images").chain(image_id.split('/')));
        let resp = self.send(Method::GET, url, None::<&()>).await?;
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        Ok(ImageBytes {
            content_type,
            bytes: resp.bytes().await?.to_vec(),
        })
    }

    /// Asks the service to export into its configured output root.
    pub async fn export(&self, force: bool) -> Result<ExportReport> {
        self.json(
            Method::POST,
            self.url(["export"]),
            Some(&ExportRequest { force }),
        )
        .await
    }
}
