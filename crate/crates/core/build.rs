fn main() {
    // torch-sys exports the libtorch directory through its `links = "tch"` key.
    if let Ok(dir) = std::env::var("DEP_TCH_LIBTORCH_LIB") {
        println!("cargo:rustc-link-arg=-Wl,-rpath,{dir}");
    }
}
