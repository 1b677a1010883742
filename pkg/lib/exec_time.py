import functools
import logging
import time

logger = logging.getLogger(__name__)


def timeit(func):
    """
    어노테이션으로 사용하며 함수의 실행시간을 로그로 남긴다.
    - 예시
    ```
    @timeit
    def record_run(model, config, dataset):
        ...
    ```

    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        result = func(*args, **kwargs)
        elapsed = time.perf_counter() - start_time
        logger.info(f"{func.__module__}.{func.__name__} took {elapsed:.3f} seconds to run.")
        return result

    return wrapper
