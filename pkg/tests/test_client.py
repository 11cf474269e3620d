import contextlib
import io
import json
import os
import threading
import unittest
from http.server import BaseHTTPRequestHandler, HTTPServer
from typing import Callable, ContextManager, List
from unittest import mock

from codealign.annotate import OracleError
from codealign.client import RemoteOracle
from codealign.codebook import CodeId

LAB = CodeId.parse("LocalLab:a")
LOINC_1 = CodeId.parse("LOINC:1")
LOINC_2 = CodeId.parse("LOINC:2")


@contextlib.contextmanager
def _serving(respond: Callable[[dict], tuple]) -> ContextManager[tuple]:
    """
    Run a one-thread HTTP server; `respond(body)` returns (status, payload).

    Yields (url, requests_seen).
    """
    seen: List[dict] = []

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers["Content-Length"])
            body = json.loads(self.rfile.read(length))
            body["_auth"] = self.headers.get("Authorization")
            seen.append(body)
            status, payload = respond(body)
            if isinstance(payload, bytes):
                blob = payload
            else:
                blob = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(blob)))
            self.end_headers()
            self.wfile.write(blob)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield "http://127.0.0.1:%d/annotate" % server.server_port, seen
    finally:
        server.shutdown()
        server.server_close()


def _labels_for(body):
    if body["task"] == "mapping":
        return [
            "positive" if item[1] == "LOINC:1" else "negative" for item in body["items"]
        ]
    if body["task"] == "feature":
        return [0.25 for _ in body["items"]]
    return ["related" for _ in body["items"]]


class RemoteOracleTest(unittest.TestCase):
    def test_mapping_round_trip(self):
        with _serving(lambda body: (200, {"labels": _labels_for(body)})) as (url, seen):
            with RemoteOracle(url, api_key="s3cret", backoff=0) as oracle:
                labels = oracle.annotate_mapping([(LAB, LOINC_1), (LAB, LOINC_2)])
        self.assertEqual([l.positive for l in labels], [True, False])
        self.assertEqual(
            seen[0]["items"],
            [["LocalLab:a", "LOINC:1"], ["LocalLab:a", "LOINC:2"]],
        )
        self.assertEqual(seen[0]["_auth"], "Bearer s3cret")

    def test_batches(self):
        with _serving(lambda body: (200, {"labels": _labels_for(body)})) as (url, seen):
            with RemoteOracle(url, batch_size=2, backoff=0) as oracle:
                scores = oracle.score_features([(LOINC_1, LOINC_2)] * 5)
        self.assertEqual([len(b["items"]) for b in seen], [2, 2, 1])
        self.assertEqual([s.score for s in scores], [0.25] * 5)

    def test_retries_server_errors(self):
        statuses = iter([503, 502, 200])

        def respond(body):
            status = next(statuses)
            return status, {"labels": _labels_for(body)} if status == 200 else {}

        with _serving(respond) as (url, seen):
            with RemoteOracle(url, backoff=0) as oracle:
                labels = oracle.annotate_relevance([(LOINC_1, LOINC_2)])
        self.assertEqual(len(seen), 3)
        self.assertTrue(labels[0].related)

    def test_gives_up_after_three_attempts(self):
        with _serving(lambda body: (500, {})) as (url, seen):
            with RemoteOracle(url, backoff=0) as oracle:
                with self.assertRaisesRegex(OracleError, "3 attempts"):
                    oracle.annotate_relevance([(LOINC_1, LOINC_2)])
        self.assertEqual(len(seen), 3)

    def test_wrong_label_count(self):
        with _serving(lambda body: (200, {"labels": []})) as (url, seen):
            with RemoteOracle(url, backoff=0) as oracle:
                with self.assertRaisesRegex(OracleError, "needs 1 labels"):
                    oracle.annotate_mapping([(LAB, LOINC_1)])
        self.assertEqual(len(seen), 1)

    def test_malformed_json(self):
        with _serving(lambda body: (200, b"not json at all")) as (url, _):
            with RemoteOracle(url, backoff=0) as oracle:
                with self.assertRaisesRegex(OracleError, "not json at all"):
                    oracle.annotate_mapping([(LAB, LOINC_1)])

    def test_bad_verdict(self):
        with _serving(lambda body: (200, {"labels": ["maybe"]})) as (url, _):
            with RemoteOracle(url, backoff=0) as oracle:
                with self.assertRaisesRegex(OracleError, "maybe"):
                    oracle.annotate_mapping([(LAB, LOINC_1)])

    def test_connection_refused(self):
        with _serving(lambda body: (200, {})) as (url, _):
            pass  # server is gone now
        with RemoteOracle(url, backoff=0, timeout=2) as oracle:
            with self.assertRaises(OracleError):
                oracle.annotate_mapping([(LAB, LOINC_1)])

    def test_closed(self):
        oracle = RemoteOracle("http://127.0.0.1:9/")
        oracle.close()
        oracle.close()  # idempotent
        with self.assertRaisesRegex(OracleError, "closed"):
            oracle.annotate_mapping([(LAB, LOINC_1)])


class FromEnvironmentTest(unittest.TestCase):
    def test_missing_endpoint_prints_banner(self):
        stderr = io.StringIO()
        with mock.patch.dict(os.environ, {}, clear=True):
            with mock.patch("sys.stderr", stderr):
                with self.assertRaisesRegex(OracleError, "CODEALIGN_TEST_URL"):
                    RemoteOracle.from_environment(
                        endpoint_env="CODEALIGN_TEST_URL",
                        api_key_env="CODEALIGN_TEST_KEY",
                    )
        self.assertIn("no annotation endpoint", stderr.getvalue())

    def test_reads_variables(self):
        env = {
            "CODEALIGN_TEST_URL": "http://example.invalid/",
            "CODEALIGN_TEST_KEY": "k",
        }
        with mock.patch.dict(os.environ, env, clear=True):
            with RemoteOracle.from_environment(
                endpoint_env="CODEALIGN_TEST_URL", api_key_env="CODEALIGN_TEST_KEY"
            ) as oracle:
                self.assertEqual(oracle._session.headers["Authorization"], "Bearer k")
