//! Regenerates `include/cdistill.h` from the public items in `src/lib.rs`.

use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    let mut config = cbindgen::Config::default();
    config.language = cbindgen::Language::C;
    config.cpp_compat = true;
    config.include_guard = Some("CDISTILL_H".into());
    config.documentation = true;
    config.header =
        Some("/* C interface to the cdistill library. Generated; do not edit. */".into());
    config.usize_is_size_t = true;
    config.enumeration.prefix_with_name = true;
    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("header generation")
        .write_to_file(crate_dir.join("include/cdistill.h"));
    println!("cargo:rerun-if-changed=src/lib.rs");
}
