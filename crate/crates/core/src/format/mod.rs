//! On-disk table format: blocks, Bloom filters, and whole tables.

pub mod block;
pub mod bloom;
pub mod table;

pub use bloom::{bloom_bits_per_element, bloom_bits_per_key, BloomFilter};
pub use table::{build_table, Table, TableBuilder, TableFooter, TableInfo, TableIter, TableOptions};
