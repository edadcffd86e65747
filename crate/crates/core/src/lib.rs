pub mod cli;
pub mod config;
pub mod deform;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod icp;
pub mod io;
pub mod kdtree;
pub mod logging;
pub mod maps;
pub mod mesh;
pub mod metrics;
pub mod pointcloud;
pub mod pointgen;
pub mod primitives;
pub mod render;
pub mod sparse;
pub mod views;
