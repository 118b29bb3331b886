import sys

from utils.cli import parse_and_dispatch
from utils.logger import logger


def main():
    logger.info("AdaPCR Process starting...")
    code = parse_and_dispatch(sys.argv[1:])
    logger.info("AdaPCR Process finished.", extra={"fields": {"exit_code": code}})
    sys.exit(code)


if __name__ == "__main__":
    main()
