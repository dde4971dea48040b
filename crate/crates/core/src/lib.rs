pub mod cli;
pub mod config;
pub mod covis_analysis;
pub mod encodings;
pub mod experiments;
pub mod geometry;
pub mod localizer;
pub mod regressor;
pub mod scene_sim;
pub mod toy2d;
