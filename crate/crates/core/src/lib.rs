pub mod data;
pub mod erm;
pub mod error;
pub mod gamp;
pub mod gaussian;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod oracle;
pub mod prox;
pub mod saddle;
pub mod table;
pub mod verify;
pub mod zoo;
