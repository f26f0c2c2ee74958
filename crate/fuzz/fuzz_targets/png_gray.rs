#![no_main]

use ctdx_core::image::decode_png_gray;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_png_gray(data) {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // Re-encoding keeps the shape.
        if let Ok(png) = img.encode_png() {
            let again = decode_png_gray(&png).unwrap();
            assert_eq!((again.height(), again.width()), (img.height(), img.width()));
        }
    }
});
