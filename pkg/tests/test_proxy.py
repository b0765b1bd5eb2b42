import pytest

from paasim.cluster import Cluster, ClusterOptions, Mode
from paasim.core import MessageKind, NodeUri
from paasim.models import task_app_submit
from paasim.netsim import Actor, EndpointKind, EndpointSpec, Network
from paasim.proxy import PROXY_READY, MessageProxy

KEY = "k"


class Sink(Actor):
    def __init__(self, network, key=KEY):
        super().__init__(network, key)
        self.got = []

    def receive(self, m, sender):
        self.got.append(m)


@pytest.fixture
def setup():
    net = Network(seed=1)
    prole = net.declare_role("Proxy", [EndpointSpec("in", EndpointKind.INPUT, 9090)], public_host="proxy")
    wrole = net.declare_role("W", [EndpointSpec("c", EndpointKind.INTERNAL)])
    mrole = net.declare_role("M", [EndpointSpec("c", EndpointKind.INTERNAL)])
    proxy = MessageProxy(net, KEY)
    inst = net.start_instance(prole)
    proxy.bind(inst, NodeUri("proxy", 9090))
    workers = []
    for _ in range(3):
        w = Sink(net)
        wi = net.start_instance(wrole)
        w.bind(wi, NodeUri("proxy", 9090, internal_endpoint=wi.address()))
        workers.append(w)
    master = Sink(net)
    mi = net.start_instance(mrole, "onprem")
    master.bind(mi, NodeUri(*mi.address()))
    return net, proxy, workers, master


def test_forward_to_encoded_endpoint(setup):
    net, proxy, workers, master = setup
    proxy.mark_ready()
    target = workers[1]
    for _ in range(4):
        master.post(MessageKind.SUBMIT_WORK_UNIT, target.uri, {"x": 1})
    net.run_until_idle()
    assert len(target.got) == 4 and not workers[0].got and not workers[2].got
    assert all(m.payload == {"x": 1} and m.target == target.uri for m in target.got)
    assert proxy.state.forwarded_count == 4


def test_missing_internal_endpoint_gets_nak(setup):
    net, proxy, workers, master = setup
    proxy.mark_ready()
    sent = master.post(MessageKind.SUBMIT_WORK_UNIT, NodeUri("proxy", 9090))
    net.run_until_idle()
    nak, = master.got
    assert nak.kind is MessageKind.PROXY_NAK and nak.ref_id == sent.message_id
    assert proxy.state.nak_count == 1 and proxy.state.forwarded_count == 0


def test_bad_key_dropped(setup):
    net, proxy, workers, master = setup
    proxy.mark_ready()
    master.shared_key = "wrong"
    master.post(MessageKind.SUBMIT_WORK_UNIT, workers[0].uri)
    net.run_until_idle()
    assert not workers[0].got and not master.got
    assert proxy.state.auth_failures == 1


def test_buffers_until_ready(setup):
    net, proxy, workers, master = setup
    events = []
    net.subscribe(PROXY_READY, events.append)
    master.post(MessageKind.SUBMIT_WORK_UNIT, workers[0].uri)
    net.run_until_idle()
    assert not workers[0].got and proxy.state.buffered_count == 1
    with pytest.raises(RuntimeError):
        proxy.on_external_message(net.message(MessageKind.HEARTBEAT, master.uri, workers[0].uri, KEY))
    proxy.mark_ready()
    proxy.mark_ready()
    net.run_until_idle()
    assert len(workers[0].got) == 1 and len(events) == 1


def _records(cluster, ev):
    return [r for r in cluster.network.trace_records() if r["ev"] == ev]


def test_heartbeats_wait_for_proxy_ready():
    c = Cluster(ClusterOptions(mode=Mode.WORKER, proxy_bind_ms=700))
    c.deploy(5)
    ready_at = next(r["t"] for r in _records(c, "publish") if r["topic"] == PROXY_READY)
    hb = [r["t"] for r in _records(c, "send") if r["msg_kind"] == "Heartbeat"]
    assert hb and min(hb) >= ready_at
    assert min(hb) - ready_at <= c.options.heartbeat_ms


def test_worker_mode_provenance():
    """Inbound worker traffic arrives through the proxy; outbound goes direct; the proxy never
    produces results."""
    c = Cluster(ClusterOptions(mode=Mode.WORKER))
    c.deploy(4)
    task_app_submit(c.client, [("spin", {}, 160)] * 20).wait()
    proxy_id = c.proxy.id
    worker_ids = set(c.workers)
    recs = c.network.trace_records()
    inbound = [r for r in recs if r["ev"] == "deliver" and r["dst"] in worker_ids]
    assert inbound and all(r["src"] == proxy_id for r in inbound)
    outbound = [r for r in recs if r["ev"] == "send" and r["src"] in worker_ids]
    assert outbound and all(r["via"] == "Direct" and r["dst"] == c.master.id for r in outbound)
    assert not any(r["ev"] == "send" and r["src"] == proxy_id and r["msg_kind"] == "WorkUnitResult"
                   for r in recs)
    assert sum(w.state.misdelivered for w in c.workers.values()) == 0
