import datetime
import json
import logging
import os
import sys
import time


class JsonLineFormatter(logging.Formatter):
    '''One JSON event per line: {ts, level, event, fields}.'''

    def format(self, record: logging.LogRecord) -> str:
        event = {
            "ts": datetime.datetime.fromtimestamp(
                record.created, tz=datetime.timezone.utc).isoformat(),
            "level": record.levelname,
            "event": record.getMessage(),
            "fields": getattr(record, "fields", {}),
        }
        if record.exc_info:
            event["fields"] = {**event["fields"],
                               "exception": self.formatException(record.exc_info)}
        return json.dumps(event, default=str)


log_dir: str = "logs"
log_date = time.strftime("%Y-%m-%d")
log_filename: str = f"{log_date}" + "_running_logs.log"
log_filepath: str = os.path.join(
    log_dir,
    log_filename
)

os.makedirs(log_dir,
            exist_ok=True
            )

formatter = JsonLineFormatter()
stream_handler = logging.StreamHandler(sys.stderr)
stream_handler.setFormatter(formatter)
file_handler = logging.FileHandler(log_filepath)
file_handler.setFormatter(formatter)

logger = logging.getLogger("AdaPCR_Process_Logger")
logger.setLevel(logging.INFO)
if not logger.handlers:
    logger.addHandler(stream_handler)
    logger.addHandler(file_handler)
logger.propagate = False
