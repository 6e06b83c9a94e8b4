pub mod aabb;
pub mod ad;
pub mod hexplane;
pub mod liegroup;
pub mod physics_losses;
pub mod pipeline;
pub mod render;
pub mod scenegen;
pub mod se3field;
