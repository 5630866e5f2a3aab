pub mod autodiff;
pub mod cli;
pub mod comm;
pub mod data;
pub mod federation;
pub mod local;
pub mod search_space;
pub mod tensor;
