//! C ABI over the `ivlate` estimators.
//!
//! Datasets and fit results are opaque handles released with their `_free`
//! function. Every fallible call returns an [`IvlateStatus`]; on failure the
//! message is kept per thread and read with [`ivlate_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ivlate::data::Dataset;
use ivlate::error::IvError;
use ivlate::estimator::{fit_estimator, Estimator, FitSettings};
use ivlate::models::Design;
use ivlate::param::{inverse_map, solve_complier_risks, Scale, StructuralPoint};
use ivlate::proposed::FitResult;
use ivlate::simulation::{build_scenario_design, generate_dataset, DgpSpec, Scenario};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IvlateStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Domain = 5,
    Unsupported = 6,
    Numerical = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IvlateScale {
    Additive = 0,
    Multiplicative = 1,
}

impl From<IvlateScale> for Scale {
    fn from(s: IvlateScale) -> Self {
        match s {
            IvlateScale::Additive => Scale::Additive,
            IvlateScale::Multiplicative => Scale::Multiplicative,
        }
    }
}

/// Opaque dataset handle.
pub struct IvlateDataset(Dataset);

/// Opaque fit result handle.
pub struct IvlateFit(FitResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &IvError) -> IvlateStatus {
    match e {
        IvError::Domain(_) | IvError::InstrumentIrrelevant | IvError::DegenerateStratum(_) => IvlateStatus::Domain,
        IvError::SelectorOutOfRange { .. } | IvError::Config(_) => IvlateStatus::InvalidArgument,
        IvError::RankDeficient => IvlateStatus::Numerical,
        IvError::Data { .. } | IvError::Csv(_) | IvError::Json(_) => IvlateStatus::Data,
        IvError::Unsupported(_) => IvlateStatus::Unsupported,
        IvError::Io(_) => IvlateStatus::Io,
    }
}

/// Runs `f`, mapping errors and panics to a status and the thread's last
/// error message.
fn guard<F: FnOnce() -> Result<(), (IvlateStatus, String)>>(f: F) -> IvlateStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IvlateStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            IvlateStatus::Panic
        }
    }
}

fn lib_err(e: IvError) -> (IvlateStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (IvlateStatus, String) {
    (IvlateStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (IvlateStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (IvlateStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ivlate_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ivlate_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a CSV file with binary columns `y`, `d`, `z` and numeric covariates.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ivlate_dataset_load_csv(path: *const c_char, out: *mut *mut IvlateDataset) -> IvlateStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let data = ivlate::io::load_csv(path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(IvlateDataset(data)));
        Ok(())
    })
}

/// Draws a dataset from the simulation design.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ivlate_dataset_simulate(
    scale: IvlateScale,
    n: usize,
    seed: u64,
    one_sided: bool,
    out: *mut *mut IvlateDataset,
) -> IvlateStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = DgpSpec {
            n,
            seed,
            one_sided,
            ..DgpSpec::with_scale(scale.into())
        };
        let data = generate_dataset(&spec).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(IvlateDataset(data)));
        Ok(())
    })
}

/// Number of rows, or 0 for a null handle.
///
/// # Safety
/// `data` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ivlate_dataset_n(data: *const IvlateDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.n())
}

/// # Safety
/// `data` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ivlate_dataset_free(data: *mut IvlateDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Fits one estimator. `scenario` names a simulation scenario (`bth`, `psc`,
/// `opc`, `bad`) for simulated data; when null every model uses all
/// covariates.
///
/// # Safety
/// `data` must be a live handle, `estimator` a NUL-terminated string,
/// `scenario` null or a NUL-terminated string, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ivlate_fit(
    data: *const IvlateDataset,
    estimator: *const c_char,
    scale: IvlateScale,
    scenario: *const c_char,
    one_sided: bool,
    out: *mut *mut IvlateFit,
) -> IvlateStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data = &data.as_ref().ok_or_else(|| null("data"))?.0;
        let est: Estimator = str_arg(estimator, "estimator")?.parse().map_err(lib_err)?;
        let design = if scenario.is_null() {
            Design::uniform((0..data.names().len()).collect())
        } else {
            let sc: Scenario = str_arg(scenario, "scenario")?.parse().map_err(lib_err)?;
            build_scenario_design(data, sc).map_err(lib_err)?
        };
        let settings = FitSettings {
            one_sided,
            ..FitSettings::new(scale.into())
        };
        let fit = fit_estimator(est, data, &design, &settings).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(IvlateFit(fit)));
        Ok(())
    })
}

/// Number of effect-model coefficients, or 0 for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ivlate_fit_n_coef(fit: *const IvlateFit) -> usize {
    fit.as_ref().map_or(0, |f| f.0.alpha.len())
}

/// Copies the coefficients into `buf`, which must hold at least
/// `ivlate_fit_n_coef(fit)` values.
///
/// # Safety
/// `fit` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ivlate_fit_alpha(fit: *const IvlateFit, buf: *mut f64, len: usize) -> IvlateStatus {
    guard(|| {
        let fit = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        if buf.is_null() && len > 0 {
            return Err(null("buf"));
        }
        if len < fit.alpha.len() {
            return Err((
                IvlateStatus::InvalidArgument,
                format!("buffer holds {len} values, fit has {}", fit.alpha.len()),
            ));
        }
        ptr::copy_nonoverlapping(fit.alpha.as_ptr(), buf, fit.alpha.len());
        Ok(())
    })
}

/// Whether every stage of the fit converged; false for a null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ivlate_fit_converged(fit: *const IvlateFit) -> bool {
    fit.as_ref().is_some_and(|f| f.0.converged)
}

/// The full result as JSON, or null on failure. Release with
/// [`ivlate_string_free`].
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ivlate_fit_to_json(fit: *const IvlateFit) -> *mut c_char {
    let mut s = ptr::null_mut();
    let status = guard(|| {
        let fit = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        let json = serde_json::to_string(fit).map_err(|e| (IvlateStatus::Data, e.to_string()))?;
        s = CString::new(json).expect("json has no nul").into_raw();
        Ok(())
    });
    if status == IvlateStatus::Ok {
        s
    } else {
        ptr::null_mut()
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ivlate_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `fit` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ivlate_fit_free(fit: *mut IvlateFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Complier risks `(f0, f1)` for effect `theta` and odds product `op`.
///
/// # Safety
/// `f0` and `f1` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ivlate_complier_risks(
    theta: f64,
    op: f64,
    scale: IvlateScale,
    f0: *mut f64,
    f1: *mut f64,
) -> IvlateStatus {
    guard(|| {
        if f0.is_null() || f1.is_null() {
            return Err(null("output"));
        }
        let r = solve_complier_risks(theta, op, scale.into()).map_err(lib_err)?;
        *f0 = r.f0;
        *f1 = r.f1;
        Ok(())
    })
}

/// Cell probabilities `p(d, y | z)` at index `4 d + 2 y + z` from the
/// structural point `(theta, phi1, phi2, phi3, phi4, op)`.
///
/// # Safety
/// `point` must be valid for 6 reads and `cells` for 8 writes.
#[no_mangle]
pub unsafe extern "C" fn ivlate_inverse_map(point: *const f64, scale: IvlateScale, cells: *mut f64) -> IvlateStatus {
    guard(|| {
        if point.is_null() || cells.is_null() {
            return Err(null("array"));
        }
        let p = std::slice::from_raw_parts(point, 6);
        let sp = StructuralPoint::new(p[0], [p[1], p[2], p[3], p[4]], p[5]);
        let cp = inverse_map(&sp, scale.into()).map_err(lib_err)?;
        let out = std::slice::from_raw_parts_mut(cells, 8);
        for d in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    out[4 * d + 2 * y + z] = cp.get(d, y, z);
                }
            }
        }
        Ok(())
    })
}
