//! Synthetic data, IDX round trips and client sharding.

use gradleak::data::{encode_idx_images, encode_idx_labels, parse_idx, split_clients, synth_dataset, IdxData};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = synth_dataset(7, 30, [1, 8, 8], 10);
    println!("{} images of shape {:?}, labels {:?}", ds.len(), ds.image_shape(), &ds.labels[..10]);

    let images = encode_idx_images(&ds.images)?;
    let labels = encode_idx_labels(&ds.labels)?;
    println!("IDX files: {} + {} bytes", images.len(), labels.len());
    if let (IdxData::Images(back), IdxData::Labels(l)) = (parse_idx(&images)?, parse_idx(&labels)?) {
        let max_err = back.data().iter().zip(ds.images.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("round trip: max pixel error {max_err:.4}, labels equal: {}", l == ds.labels);
    }

    for (i, shard) in split_clients(&ds, 4, 0)?.iter().enumerate() {
        println!("client {i}: {} samples", shard.len());
    }
    Ok(())
}
