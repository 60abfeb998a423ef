//! Doc-test harness for the guide. Each chapter of `book/src` is compiled as
//! the documentation of one module, so `cargo test` runs every Rust snippet.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(tensors, "tensors.md");
chapter!(splatting, "splatting.md");
chapter!(memory, "memory.md");
chapter!(decoding, "decoding.md");
chapter!(tracking, "tracking.md");
chapter!(synthetic, "synthetic.md");
chapter!(metrics, "metrics.md");
chapter!(training, "training.md");
chapter!(cli, "cli.md");
