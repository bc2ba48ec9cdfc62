//! Request and response bodies of the review HTTP API.

use serde::{Deserialize, Serialize};

use crate::review::{QueueSummary, ReviewItem, ReviewState};

pub const DEFAULT_PAGE_LIMIT: usize = 50;
pub const MAX_PAGE_LIMIT: usize = 1000;

/// `GET /api/queue`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueOverview {
    pub queue_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_iteration: Option<String>,
    pub summary: QueueSummary,
}

/// Query string of `GET /api/items`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemsQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<ReviewState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

/// A review item plus the natural size of its image, which the editor needs
/// to turn normalized coordinates into pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    #[serde(flatten)]
    pub item: ReviewItem,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_height: Option<u32>,
}

/// `GET /api/items`. `total` counts every item matching the state filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemPage {
    pub total: usize,
    pub offset: usize,
    pub items: Vec<ItemView>,
}

/// Body of `POST /api/export`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRequest {
    #[serde(default)]
    pub force: bool,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    /// Pending item count when an export was refused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<usize>,
}
