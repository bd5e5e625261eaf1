pub mod container;
pub mod datagen;
pub mod config;
pub mod evaluation;
pub mod commands;
