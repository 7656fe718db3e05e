pub mod materials;
pub mod oracles;
