import json
import struct
import warnings

import numpy as np
import pytest

from oxyfield import service

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from starlette.testclient import TestClient


class TestFraming:
    def test_header_is_32_bytes(self):
        hdr = service.pack_frame_header(7, 290, 275, 1000)
        assert len(hdr) == 32
        assert hdr[:4] == b"OXF1"

    def test_header_round_trip(self):
        hdr = service.pack_frame_header(123456789, 410, 410, 672400,
                                        service.ENC_RGBA8)
        doc = service.unpack_frame_header(hdr)
        assert doc == {"version": 1, "encoding": 1, "frame_id": 123456789,
                       "width": 410, "height": 410, "payload_len": 672400}

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError):
            service.unpack_frame_header(b"JUNK" + bytes(28))

    def test_field_layout_little_endian(self):
        hdr = service.pack_frame_header(1, 2, 3, 4, 0)
        version, encoding, fid, w, h, plen, reserved = struct.unpack_from(
            "<HHQIIII", hdr, 4)
        assert (version, encoding, fid, w, h, plen, reserved) == (1, 0, 1, 2, 3, 4, 0)


@pytest.fixture(scope="module")
def runtime():
    rt = service.ServiceRuntime("s5", "wedge", encoding=service.ENC_RGBA8)
    rt.start()
    yield rt
    rt.stop()


@pytest.fixture(scope="module")
def client(runtime):
    return TestClient(service.create_app(runtime))


def recv_until(ws, predicate, limit=50):
    """Pull text/binary messages until one matches; returns (kind, payload)."""
    for _ in range(limit):
        msg = ws.receive()
        if msg.get("text") is not None:
            doc = json.loads(msg["text"])
            if predicate("json", doc):
                return "json", doc
        elif msg.get("bytes") is not None:
            if predicate("bytes", msg["bytes"]):
                return "bytes", msg["bytes"]
    raise AssertionError("expected message never arrived")


class TestStreamEndpoint:
    def test_frames_arrive_with_matching_header(self, client):
        with client.websocket_connect("/stream") as ws:
            _, meta = recv_until(ws, lambda k, d: k == "json"
                                 and d.get("type") == "frame")
            kind, blob = recv_until(ws, lambda k, d: k == "bytes")
            hdr = service.unpack_frame_header(blob[:32])
            assert hdr["payload_len"] == len(blob) - 32
            assert hdr["width"] == meta["width"]
            assert hdr["height"] == meta["height"]
            assert hdr["encoding"] == service.ENC_RGBA8
            assert len(blob) - 32 == hdr["width"] * hdr["height"] * 4
            assert set(meta["timings"]) == {
                "reflectance_cube_ms", "rgb_image_ms", "oxy_correlation_ms",
                "oxy_image_ms", "overhead_ms", "total_ms"}

    def test_control_acked_at_frame_boundary(self, client):
        with client.websocket_connect("/stream") as ws:
            ws.send_text(json.dumps({"id": 11, "type": "set_threshold",
                                     "rad": 0.14}))
            _, ack = recv_until(ws, lambda k, d: k == "json"
                                and d.get("type") in ("ack", "nack"))
            assert ack["type"] == "ack" and ack["for_id"] == 11
            assert isinstance(ack["frame_id"], int)
            # the change is live no later than the acked frame
            _, meta = recv_until(ws, lambda k, d: k == "json"
                                 and d.get("type") == "frame"
                                 and d["frame_id"] >= ack["frame_id"])
            assert meta["frame_id"] >= ack["frame_id"]

    def test_malformed_json_nacked_connection_survives(self, client):
        with client.websocket_connect("/stream") as ws:
            ws.send_text("{not json")
            _, nack = recv_until(ws, lambda k, d: k == "json"
                                 and d.get("type") == "nack")
            assert nack["for_id"] is None
            ws.send_text(json.dumps({"id": 1, "type": "request_stats"}))
            _, stats = recv_until(ws, lambda k, d: k == "json"
                                  and d.get("type") == "stats")
            assert stats["counters"]["frames_out"] >= 0

    def test_unknown_control_nacked(self, client):
        with client.websocket_connect("/stream") as ws:
            ws.send_text(json.dumps({"id": 5, "type": "warp_drive"}))
            _, nack = recv_until(ws, lambda k, d: k == "json"
                                 and d.get("type") == "nack")
            assert nack["for_id"] == 5
            assert "warp_drive" in nack["reason"]

    def test_invalid_roi_nacked(self, client):
        with client.websocket_connect("/stream") as ws:
            ws.send_text(json.dumps({"id": 6, "type": "set_roi", "x": 5000,
                                     "y": 5000, "width": 8, "height": 8}))
            _, nack = recv_until(ws, lambda k, d: k == "json"
                                 and d.get("type") == "nack")
            assert nack["for_id"] == 6

    def test_stats_reports_config_and_counters(self, client):
        with client.websocket_connect("/stream") as ws:
            ws.send_text(json.dumps({"id": 2, "type": "request_stats"}))
            _, stats = recv_until(ws, lambda k, d: k == "json"
                                  and d.get("type") == "stats")
            assert stats["config"]["profile_name"] == "s5"
            assert stats["source"] == "wedge"
            assert set(stats["counters"]) == {"frames_in", "frames_out",
                                              "frames_dropped", "frames_failed"}

    def test_binary_from_client_closes_connection(self, client):
        with client.websocket_connect("/stream") as ws:
            ws.send_bytes(b"\x00\x01\x02")
            for _ in range(100):
                msg = ws.receive()
                if msg["type"] == "websocket.close":
                    assert msg["code"] == 1002
                    return
        raise AssertionError("server did not close on binary input")

    def test_pause_and_resume_acked(self, client, runtime):
        with client.websocket_connect("/stream") as ws:
            ws.send_text(json.dumps({"id": 20, "type": "pause"}))
            _, ack = recv_until(ws, lambda k, d: k == "json"
                                and d.get("type") == "ack"
                                and d.get("for_id") == 20)
            assert runtime.pause_event.is_set()
            ws.send_text(json.dumps({"id": 21, "type": "resume"}))
            _, ack = recv_until(ws, lambda k, d: k == "json"
                                and d.get("type") == "ack"
                                and d.get("for_id") == 21)
            assert not runtime.pause_event.is_set()


class TestMailbox:
    def test_latest_frame_overwrites(self):
        from oxyfield.pipeline import ProcessedFrame
        mb = service._Mailbox()
        mb.offer(ProcessedFrame(frame_id=1))
        mb.offer(ProcessedFrame(frame_id=2))
        with mb._lock:
            assert mb._frame.frame_id == 2

    def test_json_events_are_not_dropped(self):
        mb = service._Mailbox()
        mb.offer_json({"n": 1})
        mb.offer_json({"n": 2})
        with mb._lock:
            assert [e["n"] for e in mb._events] == [1, 2]
