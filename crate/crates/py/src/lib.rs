//! Python bindings for the xorelay codec, topology model, service rates and
//! experiment harness.

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use xorelay::codec::{self, AckStatus, Frame, PacketId};
use xorelay::config::ExperimentConfig;
use xorelay::harness::{self, SweepParam};
use xorelay::link_state::LinkView;
use xorelay::model::{self, Control, FlowId, NodeId, QueueKey, QueueState, WheelVariant};
use xorelay::scheduler;

/// `(combination_id, reporter, [(packet_id, decoded)])`.
type AckTuple = (u32, u32, Vec<(u32, bool)>);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn config(text: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_toml(text).map_err(value_err)
}

#[pyfunction]
fn sdbm_hash(data: &[u8]) -> u32 {
    codec::sdbm_hash(data)
}

#[pyfunction]
#[pyo3(signature = (src_ip, seq, offset=0))]
fn packet_id(src_ip: u32, seq: u32, offset: u16) -> u32 {
    codec::packet_id(src_ip, seq, offset).0
}

#[pyfunction]
fn combination_id(ids: Vec<u32>) -> u32 {
    codec::combination_id(&ids.into_iter().map(PacketId).collect::<Vec<_>>())
}

#[pyclass(name = "NativePacket", module = "xorelay_py", from_py_object)]
#[derive(Clone)]
struct PyNative(codec::NativePacket);

#[pymethods]
impl PyNative {
    #[new]
    #[pyo3(signature = (flow_id, src_ip, seq, payload, offset=0))]
    fn new(flow_id: u32, src_ip: u32, seq: u32, payload: &[u8], offset: u16) -> Self {
        Self(codec::NativePacket::new(FlowId(flow_id), src_ip, seq, offset, payload.to_vec()))
    }

    #[getter]
    fn id(&self) -> u32 {
        self.0.id.0
    }

    #[getter]
    fn flow_id(&self) -> u32 {
        self.0.flow_id.0
    }

    #[getter]
    fn payload<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.payload)
    }

    fn __repr__(&self) -> String {
        format!("NativePacket(id={}, flow={}, len={})", self.0.id, self.0.flow_id, self.0.payload.len())
    }
}

#[pyclass(name = "EncodedPacket", module = "xorelay_py", from_py_object)]
#[derive(Clone)]
struct PyEncoded(codec::EncodedPacket);

#[pymethods]
impl PyEncoded {
    #[getter]
    fn combination_id(&self) -> u32 {
        self.0.combination_id
    }

    /// `(packet_id, next_hop, orig_len)` per member.
    #[getter]
    fn entries(&self) -> Vec<(u32, u32, u16)> {
        self.0.entries.iter().map(|e| (e.packet_id.0, e.next_hop.0, e.orig_len)).collect()
    }

    #[getter]
    fn payload<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.payload)
    }

    /// `(combination_id, reporter, [(packet_id, decoded)])` per piggybacked record.
    #[getter]
    fn acks(&self) -> Vec<AckTuple> {
        ack_tuples(&self.0.piggyback)
    }

    fn __len__(&self) -> usize {
        self.0.entries.len()
    }
}

fn ack_tuples(records: &[codec::AckRecord]) -> Vec<AckTuple> {
    records
        .iter()
        .map(|r| {
            let s = r.statuses.iter().map(|(id, st)| (id.0, *st == AckStatus::Decoded)).collect();
            (r.combination_id, r.reporter.0, s)
        })
        .collect()
}

/// XOR of `packets`; `next_hops[i]` is the intended receiver of `packets[i]`.
#[pyfunction]
fn encode(packets: Vec<PyNative>, next_hops: Vec<u32>) -> PyResult<PyEncoded> {
    if packets.len() != next_hops.len() {
        return Err(PyValueError::new_err("one next hop per packet"));
    }
    let members: Vec<(&codec::NativePacket, NodeId)> =
        packets.iter().zip(&next_hops).map(|(p, h)| (&p.0, NodeId(*h))).collect();
    codec::xor_encode(&members).map(PyEncoded).map_err(value_err)
}

#[pyfunction]
fn decode<'py>(py: Python<'py>, encoded: &PyEncoded, keys: Vec<PyNative>, target: u32) -> PyResult<Bound<'py, PyBytes>> {
    let keys: Vec<codec::NativePacket> = keys.into_iter().map(|k| k.0).collect();
    let out = codec::xor_decode(&encoded.0, &keys, PacketId(target)).map_err(value_err)?;
    Ok(PyBytes::new(py, &out))
}

#[pyfunction]
fn serialize_frame<'py>(py: Python<'py>, encoded: &PyEncoded) -> PyResult<Bound<'py, PyBytes>> {
    let bytes = codec::serialize_frame(&Frame::Data(encoded.0.clone())).map_err(value_err)?;
    Ok(PyBytes::new(py, &bytes))
}

/// Data frames come back as `EncodedPacket`, ACK frames as a list of records.
#[pyfunction]
fn parse_frame<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyAny>> {
    match codec::parse_frame(data).map_err(value_err)? {
        Frame::Data(enc) => Ok(Bound::new(py, PyEncoded(enc))?.into_any()),
        Frame::Ack(records) => Ok(ack_tuples(&records).into_pyobject(py)?.into_any()),
    }
}

#[pyclass(name = "Topology", module = "xorelay_py", from_py_object)]
#[derive(Clone)]
struct PyTopology(model::Topology);

#[pymethods]
impl PyTopology {
    #[getter]
    fn relay(&self) -> u32 {
        self.0.relay().0
    }

    #[getter]
    fn neighbors(&self) -> Vec<u32> {
        self.0.neighbors().iter().map(|n| n.0).collect()
    }

    /// `(flow_id, source, destination)` per flow.
    #[getter]
    fn flows(&self) -> Vec<(u32, u32, u32)> {
        self.0.flows().iter().map(|f| (f.id.0, f.source.0, f.destination.0)).collect()
    }

    fn pdr(&self, src: u32, dst: u32) -> f64 {
        self.0.pdr(NodeId(src), NodeId(dst))
    }

    fn rate(&self, src: u32, dst: u32) -> Option<f64> {
        self.0.rate(NodeId(src), NodeId(dst))
    }

    fn set_pdr(&mut self, src: u32, dst: u32, pdr: f64) -> PyResult<()> {
        self.0.set_pdr(NodeId(src), NodeId(dst), pdr).map_err(value_err)
    }

    fn set_rate(&mut self, src: u32, dst: u32, rate: f64) -> PyResult<()> {
        self.0.set_rate(NodeId(src), NodeId(dst), rate).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Topology(relay={}, neighbors={}, flows={})", self.0.relay(), self.0.neighbors().len(), self.0.flows().len())
    }
}

#[pyfunction]
#[pyo3(signature = (n_flows, variant="full"))]
fn build_wheel(n_flows: usize, variant: &str) -> PyResult<PyTopology> {
    let v = match variant {
        "full" => WheelVariant::Full,
        "half" => WheelVariant::Half,
        other => return Err(PyValueError::new_err(format!("variant must be `full` or `half`, not `{other}`"))),
    };
    model::build_wheel(n_flows, v).map(PyTopology).map_err(value_err)
}

fn view(t: &PyTopology) -> LinkView {
    LinkView::from_topology(&t.0, 0)
}

fn control_members(c: &Control) -> Vec<(u32, String)> {
    c.members().iter().map(|m| (m.flow.0, m.state.tag().to_string())).collect()
}

/// Admissible controls as lists of `(flow_id, state)`; `with_states` adds the
/// good-state queues.
#[pyfunction]
#[pyo3(signature = (topology, with_states=false))]
fn enumerate_controls(topology: &PyTopology, with_states: bool) -> Vec<Vec<(u32, String)>> {
    let v = view(topology);
    let controls =
        if with_states { model::enumerate_state_controls(&topology.0, &v) } else { model::enumerate_controls(&topology.0, &v) };
    controls.iter().map(control_members).collect()
}

fn parse_member(flow: u32, state: &str) -> PyResult<QueueKey> {
    let state = match state {
        "u" | "unknown" => QueueState::Unknown,
        "g" | "good" => QueueState::Good,
        other => return Err(PyValueError::new_err(format!("unknown queue state `{other}`"))),
    };
    Ok(QueueKey { flow: FlowId(flow), state })
}

/// Expected service rate of `flow` under the control made of `members`, each
/// a flow id or a `(flow_id, state)` pair.
#[pyfunction]
fn mu(topology: &PyTopology, members: Vec<Bound<'_, PyAny>>, flow: u32) -> PyResult<f64> {
    let mut keys = Vec::with_capacity(members.len());
    for m in members {
        let key = match m.extract::<u32>() {
            Ok(f) => QueueKey::unknown(FlowId(f)),
            Err(_) => {
                let (f, s): (u32, String) = m.extract()?;
                parse_member(f, &s)?
            }
        };
        keys.push(key);
    }
    let control = Control::new(keys).ok_or_else(|| PyValueError::new_err("empty or repeated control"))?;
    scheduler::mu(&topology.0, &view(topology), &control, FlowId(flow)).map_err(|e| match e {
        scheduler::SchedulerError::NotAMember(_) => PyKeyError::new_err(e.to_string()),
        _ => value_err(e),
    })
}

/// Runs the experiment described by a TOML config; returns its statistics.
#[pyfunction]
#[pyo3(signature = (config_toml, seed=None))]
fn run_experiment<'py>(py: Python<'py>, config_toml: &str, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = config(config_toml)?;
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    let m = py.detach(|| harness::run_experiment(&cfg)).map_err(value_err)?;
    json_to_py(py, &serde_json::to_string(&m).map_err(value_err)?)
}

#[pyfunction]
#[pyo3(signature = (config_toml, tolerance=1.0))]
fn stability_search<'py>(py: Python<'py>, config_toml: &str, tolerance: f64) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_toml)?;
    let res = py.detach(|| harness::stability_search(&cfg, tolerance)).map_err(value_err)?;
    json_to_py(py, &serde_json::to_string(&res).map_err(value_err)?)
}

/// Ratio of a coded throughput (or stable rate) to its plain baseline.
#[pyfunction]
fn gain(nc: f64, plain: f64) -> PyResult<f64> {
    harness::ratio(nc, plain).map_err(value_err)
}

/// Result rows, one per flow and value, as dictionaries.
#[pyfunction]
fn sweep<'py>(py: Python<'py>, config_toml: &str, param: &str, values: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_toml)?;
    let p: SweepParam = param.parse().map_err(value_err)?;
    let rows = py.detach(|| harness::sweep_rows(&cfg, p, &values)).map_err(value_err)?;
    json_to_py(py, &harness::to_json(&rows))
}

/// TOML config for a named preset.
#[pyfunction]
#[pyo3(signature = (name, algorithm="alg1"))]
fn preset(name: &str, algorithm: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::for_preset(name, algorithm);
    cfg.validate().map_err(value_err)?;
    Ok(cfg.to_toml())
}

#[pymodule]
fn xorelay_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNative>()?;
    m.add_class::<PyEncoded>()?;
    m.add_class::<PyTopology>()?;
    m.add_function(wrap_pyfunction!(sdbm_hash, m)?)?;
    m.add_function(wrap_pyfunction!(packet_id, m)?)?;
    m.add_function(wrap_pyfunction!(combination_id, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_frame, m)?)?;
    m.add_function(wrap_pyfunction!(parse_frame, m)?)?;
    m.add_function(wrap_pyfunction!(build_wheel, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_controls, m)?)?;
    m.add_function(wrap_pyfunction!(mu, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(stability_search, m)?)?;
    m.add_function(wrap_pyfunction!(gain, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    Ok(())
}
