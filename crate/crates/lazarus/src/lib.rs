pub mod boot;
pub mod crypto;
pub mod hub;
pub mod mcu;
pub mod tee;
pub mod wire;
