use std::ffi::{CStr, CString};
use std::ptr;

use ivlate_ffi::*;

fn last_error() -> String {
    let p = ivlate_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn simulate_fit_and_read_back() {
    unsafe {
        let mut data = ptr::null_mut();
        assert_eq!(
            ivlate_dataset_simulate(IvlateScale::Additive, 1000, 11, false, &mut data),
            IvlateStatus::Ok
        );
        assert_eq!(ivlate_dataset_n(data), 1000);
        let est = CString::new("mle").unwrap();
        let sc = CString::new("bth").unwrap();
        let mut fit = ptr::null_mut();
        assert_eq!(
            ivlate_fit(data, est.as_ptr(), IvlateScale::Additive, sc.as_ptr(), false, &mut fit),
            IvlateStatus::Ok
        );
        assert!(ivlate_fit_converged(fit));
        assert_eq!(ivlate_fit_n_coef(fit), 2);
        let mut alpha = [0.0; 2];
        assert_eq!(ivlate_fit_alpha(fit, alpha.as_mut_ptr(), 2), IvlateStatus::Ok);
        assert!((alpha[1] + 1.0).abs() < 0.8, "{alpha:?}");

        let mut short = [0.0; 1];
        assert_eq!(ivlate_fit_alpha(fit, short.as_mut_ptr(), 1), IvlateStatus::InvalidArgument);
        assert!(last_error().contains("buffer"));

        let json = ivlate_fit_to_json(fit);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        ivlate_string_free(json);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["estimator_tag"], "mle");
        assert_eq!(v["alpha"][1].as_f64().unwrap(), alpha[1]);

        ivlate_fit_free(fit);
        ivlate_dataset_free(data);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut data = ptr::null_mut();
        let missing = CString::new("/nonexistent/file.csv").unwrap();
        assert_eq!(ivlate_dataset_load_csv(missing.as_ptr(), &mut data), IvlateStatus::Io);
        assert!(data.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(
            ivlate_dataset_simulate(IvlateScale::Additive, 200, 1, false, ptr::null_mut()),
            IvlateStatus::NullPointer
        );

        ivlate_dataset_simulate(IvlateScale::Multiplicative, 300, 2, false, &mut data);
        let wang = CString::new("mle.wang").unwrap();
        let mut fit = ptr::null_mut();
        assert_eq!(
            ivlate_fit(data, wang.as_ptr(), IvlateScale::Multiplicative, ptr::null(), false, &mut fit),
            IvlateStatus::Unsupported
        );
        let bogus = CString::new("nope").unwrap();
        assert_eq!(
            ivlate_fit(data, bogus.as_ptr(), IvlateScale::Additive, ptr::null(), false, &mut fit),
            IvlateStatus::InvalidArgument
        );
        assert!(last_error().contains("nope"));
        assert!(fit.is_null());
        ivlate_dataset_free(data);

        // freeing null handles is a no-op
        ivlate_dataset_free(ptr::null_mut());
        ivlate_fit_free(ptr::null_mut());
        ivlate_string_free(ptr::null_mut());
        assert_eq!(ivlate_fit_n_coef(ptr::null()), 0);
    }
}

#[test]
fn load_csv_round_trip() {
    let dir = std::env::temp_dir().join(format!("ivlate-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("d.csv");
    std::fs::write(&path, "y,d,z,age\n1,1,1,30\n0,0,0,40\n1,0,1,50\n0,1,0,20\n").unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut data = ptr::null_mut();
        assert_eq!(ivlate_dataset_load_csv(c.as_ptr(), &mut data), IvlateStatus::Ok);
        assert_eq!(ivlate_dataset_n(data), 4);
        ivlate_dataset_free(data);
    }
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn scalar_wrappers() {
    unsafe {
        let (mut f0, mut f1) = (0.0, 0.0);
        assert_eq!(
            ivlate_complier_risks(0.2, 1.0, IvlateScale::Additive, &mut f0, &mut f1),
            IvlateStatus::Ok
        );
        assert!((f1 - f0 - 0.2).abs() < 1e-14);
        assert!((f0 * f1 - (1.0 - f0) * (1.0 - f1)).abs() < 1e-14);
        assert_eq!(
            ivlate_complier_risks(2.0, 1.0, IvlateScale::Additive, &mut f0, &mut f1),
            IvlateStatus::Domain
        );

        let point = [0.1, 0.4, 0.3, 0.6, 0.5, 1.5];
        let mut cells = [0.0; 8];
        assert_eq!(
            ivlate_inverse_map(point.as_ptr(), IvlateScale::Additive, cells.as_mut_ptr()),
            IvlateStatus::Ok
        );
        for z in 0..2 {
            let total: f64 = (0..4).map(|k| cells[2 * k + z]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(ivlate_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ivlate.h")).unwrap();
    for f in [
        "ivlate_last_error",
        "ivlate_dataset_load_csv",
        "ivlate_dataset_simulate",
        "ivlate_fit(",
        "ivlate_fit_alpha",
        "ivlate_fit_free",
        "ivlate_inverse_map",
        "IVLATE_STATUS_PANIC",
    ] {
        assert!(header.contains(f), "{f} missing from header");
    }
}
