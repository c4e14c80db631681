#[cfg(feature = "ffi-headers")]
mod ffi_headers {
    use std::env;

    pub fn generate_headers() {
        let crate_dir = env::var("CARGO_MANIFEST_DIR").expect("CARGO_MANIFEST_DIR is set by cargo");
        let config = cbindgen::Config::from_file(format!("{crate_dir}/cbindgen.toml")).expect("readable cbindgen.toml");
        cbindgen::generate_with_config(&crate_dir, config)
            .expect("could not generate the C header")
            .write_to_file(format!("{crate_dir}/include/flexmerge.h"));
    }
}

fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    #[cfg(feature = "ffi-headers")]
    ffi_headers::generate_headers();
}
