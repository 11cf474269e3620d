import logging
import os
import sys
import textwrap
import threading
import time
from typing import Any, List, Optional, Sequence, Tuple

import requests

from .annotate import (
    FeatureScore,
    MappingLabel,
    Oracle,
    OracleError,
    Pair,
    RelevanceLabel,
    require_items,
)
from .codebook import CodeId

logger = logging.getLogger(__name__)

_EXCERPT = 200

# retried; anything else fails the batch at once
_TRANSIENT = (requests.ConnectionError, requests.Timeout, requests.HTTPError)


def _excerpt(payload: Any) -> str:
    text = repr(payload)
    return text if len(text) <= _EXCERPT else text[:_EXCERPT] + "..."


class RemoteOracle(Oracle):
    """
    Ask a JSON-over-HTTP annotation service.

    Each batch is one ``POST`` of ``{"task": ..., "items": [...]}``; the
    service answers ``{"labels": [...]}`` with one label per item, in order.
    Tasks and label types:

    * ``mapping``: items ``[local, standard]``; labels ``"positive"`` or
      ``"negative"``
    * ``relevance``: items ``[a, b]``; labels ``"related"`` or ``"unrelated"``
    * ``feature``: items ``[feature, target]``; labels numbers in [0, 1]
    * ``describe``: items ``[code, description]``; labels strings

    Codes travel as ``"System:value"``.

    Transport failures (connection errors, timeouts, 5xx responses) are
    retried with exponential backoff. A response that breaks the contract is
    not retried. Either way the whole batch fails with :class:`OracleError`
    and nothing from it is kept.

    Thread-safe: batches from several threads share one HTTP session, one
    request at a time.

    :param endpoint: Service URL. Never logged.
    :param api_key: Sent as a bearer token, if set. Never logged.
    :param timeout: Seconds per request.
    :param attempts: Tries per batch, including the first.
    :param backoff: Seconds before the first retry; doubles each retry.
    """

    name = "remote"

    def __init__(
        self,
        endpoint: str,
        *,
        api_key: Optional[str] = None,
        timeout: float = 60.0,
        attempts: int = 3,
        backoff: float = 1.0,
        batch_size: int = 50,
        session: Optional[requests.Session] = None,
    ):
        if attempts < 1:
            raise ValueError("attempts must be >= 1; got %d" % attempts)
        self._endpoint = endpoint
        self._timeout = timeout
        self._attempts = attempts
        self._backoff = backoff
        self._batch_size = batch_size
        self._session = session or requests.Session()
        if api_key:
            self._session.headers["Authorization"] = "Bearer %s" % api_key
        self._lock = threading.Lock()
        self._closed = False

    @classmethod
    def from_environment(
        cls, *, endpoint_env: str, api_key_env: str, **kwargs
    ) -> "RemoteOracle":
        """
        Read the endpoint and key from the named environment variables.

        :raises OracleError: if the endpoint variable is unset.
        """
        endpoint = os.environ.get(endpoint_env)
        if not endpoint:
            sys.stderr.write(
                textwrap.dedent(
                    """
                    *** codealign has no annotation endpoint. ***

                    The remote annotation oracle reads its URL from the
                    environment variable %s (and an optional key from %s).
                    Set it, or pick another oracle with
                    annotate.oracle=synthetic or annotate.oracle=file.
                    """
                    % (endpoint_env, api_key_env)
                )
            )
            raise OracleError("Environment variable %s is not set" % endpoint_env)
        return cls(endpoint, api_key=os.environ.get(api_key_env), **kwargs)

    def __enter__(self):
        return self

    def __exit__(self, *args):
        self.close()

    def close(self) -> None:
        with self._lock:
            if not self._closed:
                self._session.close()
                self._closed = True

    def _post(self, task: str, items: List[List[Any]]) -> List[Any]:
        body = {"task": task, "items": items}
        delay = self._backoff
        last_error: Optional[Exception] = None
        for attempt in range(1, self._attempts + 1):
            try:
                with self._lock:
                    if self._closed:
                        raise OracleError("RemoteOracle is closed")
                    response = self._session.post(
                        self._endpoint, json=body, timeout=self._timeout
                    )
                if response.status_code >= 500:
                    raise requests.HTTPError("HTTP %d" % response.status_code)
            except _TRANSIENT as err:
                last_error = err
                logger.warning(
                    "Annotation %s batch of %d failed (attempt %d/%d): %s",
                    task,
                    len(items),
                    attempt,
                    self._attempts,
                    type(err).__name__,
                )
                if attempt < self._attempts:
                    time.sleep(delay)
                    delay *= 2
                continue
            return self._parse(task, items, response)
        raise OracleError(
            "Annotation %s batch failed after %d attempts: %s"
            % (task, self._attempts, last_error)
        )

    @staticmethod
    def _parse(
        task: str, items: List[List[Any]], response: requests.Response
    ) -> List[Any]:
        if response.status_code != 200:
            raise OracleError(
                "Annotation service answered HTTP %d: %s"
                % (response.status_code, _excerpt(response.text))
            )
        try:
            payload = response.json()
        except ValueError:
            raise OracleError(
                "Annotation response is not JSON: %s" % _excerpt(response.text)
            )
        labels = payload.get("labels") if isinstance(payload, dict) else None
        if not isinstance(labels, list) or len(labels) != len(items):
            raise OracleError(
                "Annotation response needs %d labels for task %s: %s"
                % (len(items), task, _excerpt(payload))
            )
        return labels

    def _ask(self, task: str, items: List[List[Any]]) -> List[Any]:
        labels: List[Any] = []
        for start in range(0, len(items), self._batch_size):
            labels.extend(self._post(task, items[start : start + self._batch_size]))
        return labels

    @staticmethod
    def _verdicts(labels: List[Any], yes: str, no: str) -> List[bool]:
        out = []
        for label in labels:
            if label not in (yes, no):
                raise OracleError(
                    "Expected %r or %r; got %s" % (yes, no, _excerpt(label))
                )
            out.append(label == yes)
        return out

    @staticmethod
    def _codes(pairs: Sequence[Tuple[CodeId, CodeId]]) -> List[List[str]]:
        return [[str(a), str(b)] for a, b in pairs]

    def annotate_mapping(self, candidates: Sequence[Pair]) -> List[MappingLabel]:
        require_items(candidates, "mapping")
        labels = self._ask("mapping", self._codes(candidates))
        verdicts = self._verdicts(labels, "positive", "negative")
        return [MappingLabel(a, b, v) for (a, b), v in zip(candidates, verdicts)]

    def annotate_relevance(self, pairs: Sequence[Pair]) -> List[RelevanceLabel]:
        require_items(pairs, "relevance")
        labels = self._ask("relevance", self._codes(pairs))
        verdicts = self._verdicts(labels, "related", "unrelated")
        return [RelevanceLabel(a, b, v) for (a, b), v in zip(pairs, verdicts)]

    def score_features(self, pairs: Sequence[Pair]) -> List[FeatureScore]:
        require_items(pairs, "feature")
        labels = self._ask("feature", self._codes(pairs))
        scores = []
        for (f, t), label in zip(pairs, labels):
            if isinstance(label, bool) or not isinstance(label, (int, float)):
                raise OracleError("Expected a score; got %s" % _excerpt(label))
            try:
                scores.append(FeatureScore(f, t, float(label)))
            except ValueError as err:
                raise OracleError(str(err))
        return scores

    def expand_descriptions(self, items: Sequence[Tuple[CodeId, str]]) -> List[str]:
        if not items:
            return []
        labels = self._ask("describe", [[str(code), text] for code, text in items])
        for label in labels:
            if not isinstance(label, str):
                raise OracleError("Expected a description; got %s" % _excerpt(label))
        return labels
