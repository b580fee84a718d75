# pafa tests
