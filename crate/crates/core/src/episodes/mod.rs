//! Synthetic cross-domain data, episodic sampling and episode files.

mod benchmark;
mod domain;
mod episode;
mod io;

pub use benchmark::{make_benchmark, BenchmarkSpec};
pub use domain::{Domain, DomainSpec, Nonlinearity, Transform};
pub use episode::{Episode, EpisodeShape, Sample, Task};
pub use io::{
    episodes_from_str, episodes_to_string, read_episodes, write_episodes, EpisodeHeader, EPISODE_FORMAT_VERSION,
};
