//! Synthetic multi-profile benchmark: data, warm start, campaigns, registry.

pub mod bench;
pub mod campaign;
pub mod data;
pub mod registry;
pub mod warm;

pub use campaign::{run_campaign, Campaign, CampaignSetup, ProfileOutcome};
pub use data::{generate_profiles, ProfileData, SyntheticSpec};
pub use registry::{mask_distances, ProfileRegistry};
pub use warm::{warm_start, WarmStart};
