use trusworthy::config::RunConfig;
use trusworthy::data::{bag_positions, Dataset};
use trusworthy::io::dataset::{read_dataset, write_dataset};
use trusworthy::pipeline::{bags_tsv, read_bags};
use trusworthy_core::phantom::{generate_dataset, PhantomConfig};

fn small_phantom() -> Vec<trusworthy_core::Core> {
    generate_dataset(&PhantomConfig {
        n_patients: 3,
        cores_per_patient: 2,
        cancer_prevalence: 0.5,
        seed: 4,
        ..PhantomConfig::default()
    })
    .unwrap()
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cores = small_phantom();
    write_dataset(dir.path(), &cores).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, cores);
}

#[test]
fn truncated_array_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cores = small_phantom();
    write_dataset(dir.path(), &cores).unwrap();
    let path = dir.path().join(format!("cores/{}.image.raw", cores[0].core_id));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), trusworthy::error::exit::DATA, "{err}");
}

#[test]
fn bag_table_round_trips() {
    let cfg = RunConfig::desk();
    let ds = Dataset::new(small_phantom()).unwrap();
    let bags = bag_positions(&ds, &cfg.roi.grid, cfg.roi.bag_size).unwrap();
    assert!(bags.values().all(|b| b.len() == cfg.roi.bag_size));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bags.tsv");
    std::fs::write(&path, bags_tsv(&bags)).unwrap();
    assert_eq!(read_bags(&path).unwrap(), bags);
}
