//! Shared fixtures for the criterion benches.

use tileflow::scheduler::{EtModel, Infrastructure, Instance};
use tileflow::slide::default_artifacts;
use tileflow::{
    encode, generate_slide, partition, split_tiles, strip_metadata, CoordinateMatrix, EncodedPartition,
    PartitionPolicy, PerturbationSecret, ShardLayout, TileGrid,
};

/// A stripped slide of `side`² pixels cut into `tile_size` tiles.
pub fn grid(side: usize, tile_size: usize) -> TileGrid {
    let rows = side.div_ceil(tile_size);
    let slide = generate_slide(42, side, side, tile_size, &default_artifacts(rows, rows)).expect("valid slide");
    let (clean, _) = strip_metadata(slide).expect("fresh slide has a header");
    split_tiles(&clean, tile_size).expect("stripped").0
}

/// `k` shards of `tiles_per_shard` tiles over four heterogeneous sites.
pub fn instance(k: usize, tiles_per_shard: usize) -> Instance {
    let infras = vec![
        Infrastructure::new("edge", 0.5, 0.1, 1e6),
        Infrastructure::new("campus", 1.0, 0.4, 5e6),
        Infrastructure::new("cloud-a", 2.0, 1.0, 1e7),
        Infrastructure::new("cloud-b", 4.0, 2.5, 2e7),
    ];
    Instance::new(vec![tiles_per_shard; k], infras, EtModel::default()).expect("valid instance")
}

/// Encoded latin-scatter shards of `grid` and the matching scheduling instance.
pub fn shards(grid: &TileGrid, k: usize) -> (Vec<EncodedPartition>, Instance) {
    let ax = CoordinateMatrix::identity(grid.rows, grid.cols);
    let secret = PerturbationSecret::generate(7, grid.rows, grid.cols);
    let layout = ShardLayout::new(k, PartitionPolicy::LatinScatter);
    let parts = partition(&encode(&ax, &secret).expect("shape"), grid, &secret, &layout).expect("valid layout");
    let inst = Instance::from_partitions(&parts, instance(1, 1).infras, EtModel::default()).expect("valid instance");
    (parts, inst)
}
